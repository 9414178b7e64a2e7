use serde::{Deserialize, Serialize};

use crate::compression::MASK_BLOCK;
use crate::error::{Error, Result};
use crate::isa::Stage;

fn yes() -> bool {
    true
}

/// Length classes sharing one compiled program.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketSchedule {
    #[serde(default = "BucketSchedule::default_prefill")]
    pub prefill_bucket: usize,
    #[serde(default = "BucketSchedule::default_decode")]
    pub decode_bucket: usize,
    #[serde(default = "BucketSchedule::default_max_len")]
    pub max_len: usize,
    /// One program copy for all SLRs, addressed through per-SLR base tables.
    #[serde(default = "yes")]
    pub slr_sharing: bool,
    #[serde(default = "yes")]
    pub channel_merge: bool,
}

impl Default for BucketSchedule {
    fn default() -> Self {
        BucketSchedule {
            prefill_bucket: Self::default_prefill(),
            decode_bucket: Self::default_decode(),
            max_len: Self::default_max_len(),
            slr_sharing: true,
            channel_merge: true,
        }
    }
}

impl BucketSchedule {
    fn default_prefill() -> usize {
        64
    }
    fn default_decode() -> usize {
        16
    }
    fn default_max_len() -> usize {
        2048
    }

    pub fn with_max_len(max_len: usize) -> Self {
        BucketSchedule { max_len, ..Default::default() }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: BucketSchedule = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let (p, d, max) = (self.prefill_bucket, self.decode_bucket, self.max_len);
        if p == 0 || d == 0 || max == 0 {
            return Err(Error::Config("bucket sizes and max_len must be positive".into()));
        }
        if max % p != 0 || max % d != 0 {
            return Err(Error::Config(format!("buckets {p}/{d} must divide max_len {max}")));
        }
        if d > p {
            return Err(Error::Config(format!("decode bucket {d} exceeds prefill bucket {p}")));
        }
        // A decode bucket must not straddle attention blocks unless it covers whole ones.
        if MASK_BLOCK % d != 0 && d % MASK_BLOCK != 0 {
            return Err(Error::Config(format!("decode bucket {d} must divide or be a multiple of {MASK_BLOCK}")));
        }
        Ok(())
    }

    pub fn bucket(&self, stage: Stage) -> usize {
        match stage {
            Stage::Prefill => self.prefill_bucket,
            Stage::Decode => self.decode_bucket,
        }
    }

    /// Bucket lengths of a stage, ascending.
    pub fn buckets(&self, stage: Stage) -> Vec<usize> {
        let b = self.bucket(stage);
        (1..=self.max_len / b).map(|i| i * b).collect()
    }
}

/// Smallest multiple of the stage's bucket covering `len`.
pub fn bucketize(len: usize, stage: Stage, sched: &BucketSchedule) -> Result<usize> {
    if len > sched.max_len {
        return Err(Error::Capacity { len, max_len: sched.max_len });
    }
    if len == 0 {
        return Err(Error::Config("length must be at least 1".into()));
    }
    let b = sched.bucket(stage);
    Ok(len.div_ceil(b) * b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bucketize_examples() {
        let s = BucketSchedule::default();
        assert_eq!(bucketize(7, Stage::Decode, &s).unwrap(), 16);
        assert_eq!(bucketize(64, Stage::Prefill, &s).unwrap(), 64);
        assert_eq!(bucketize(65, Stage::Prefill, &s).unwrap(), 128);
        assert!(matches!(bucketize(2049, Stage::Prefill, &s), Err(Error::Capacity { .. })));
    }

    #[test]
    fn default_library_shape() {
        let s = BucketSchedule::default();
        assert_eq!(s.buckets(Stage::Prefill).len(), 32);
        assert_eq!(s.buckets(Stage::Decode).len(), 128);
    }

    #[test]
    fn invalid_schedules() {
        assert!(BucketSchedule { decode_bucket: 128, ..Default::default() }.validate().is_err());
        assert!(BucketSchedule { prefill_bucket: 48, ..Default::default() }.validate().is_err());
        assert!(BucketSchedule { decode_bucket: 24, prefill_bucket: 48, max_len: 48 * 64, ..Default::default() }
            .validate()
            .is_err());
        assert!(BucketSchedule::from_json(r#"{"prefill_bucket": 2048}"#).is_ok());
    }
}
