use half::{bf16, f16};

use crate::error::{Error, Result};

/// 16-bit row storage. Encoding rounds to nearest, ties to even.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StorageDtype {
    Bf16,
    F16,
}

impl StorageDtype {
    pub const fn code(self) -> u32 {
        match self {
            StorageDtype::Bf16 => 1,
            StorageDtype::F16 => 2,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        match code {
            1 => Ok(StorageDtype::Bf16),
            2 => Ok(StorageDtype::F16),
            other => Err(Error::Config(format!("unknown storage dtype code {other}"))),
        }
    }

    pub const fn size_bytes(self) -> usize {
        2
    }

    pub fn name(self) -> &'static str {
        match self {
            StorageDtype::Bf16 => "bf16",
            StorageDtype::F16 => "f16",
        }
    }

    #[inline]
    pub fn encode(self, v: f64) -> u16 {
        match self {
            StorageDtype::Bf16 => bf16::from_f64(v).to_bits(),
            StorageDtype::F16 => f16::from_f64(v).to_bits(),
        }
    }

    #[inline]
    pub fn decode(self, bits: u16) -> f64 {
        match self {
            StorageDtype::Bf16 => bf16::from_bits(bits).to_f64(),
            StorageDtype::F16 => f16::from_bits(bits).to_f64(),
        }
    }

    /// Explicit mantissa bits of the format.
    pub const fn mantissa_bits(self) -> u32 {
        match self {
            StorageDtype::Bf16 => 7,
            StorageDtype::F16 => 10,
        }
    }

    /// Half a unit in the last place at the magnitude of `v`, for values in
    /// the format's normal range.
    pub fn half_ulp(self, v: f64) -> f64 {
        if v == 0.0 {
            return 0.0;
        }
        let exp = v.abs().log2().floor();
        0.5 * 2f64.powf(exp - f64::from(self.mantissa_bits()))
    }
}

impl std::str::FromStr for StorageDtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bf16" | "bfloat16" => Ok(StorageDtype::Bf16),
            "f16" | "float16" => Ok(StorageDtype::F16),
            other => Err(Error::Config(format!("unknown storage dtype {other:?}"))),
        }
    }
}

impl std::fmt::Display for StorageDtype {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ties_round_to_even() {
        // 1 + 2^-8 sits exactly between bf16 neighbours 1 and 1 + 2^-7.
        let tie = 1.0 + 2f64.powi(-8);
        assert_eq!(StorageDtype::Bf16.decode(StorageDtype::Bf16.encode(tie)), 1.0);
        let tie_up = 1.0 + 3.0 * 2f64.powi(-8);
        assert_eq!(
            StorageDtype::Bf16.decode(StorageDtype::Bf16.encode(tie_up)),
            1.0 + 2.0 * 2f64.powi(-7)
        );
        let tie16 = 1.0 + 2f64.powi(-11);
        assert_eq!(StorageDtype::F16.decode(StorageDtype::F16.encode(tie16)), 1.0);
    }

    proptest! {
        #[test]
        fn decode_within_half_ulp(v in -60000.0f64..60000.0, bf in any::<bool>()) {
            prop_assume!(v.abs() > 1e-4);
            let dt = if bf { StorageDtype::Bf16 } else { StorageDtype::F16 };
            let back = dt.decode(dt.encode(v));
            prop_assert!((back - v).abs() <= dt.half_ulp(v) * (1.0 + 1e-12), "{} -> {}", v, back);
        }
    }
}
