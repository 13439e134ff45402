use core::fmt::{Debug, Display};

use num_traits::Float;

/// Scalar type carried by [`Matrix`](crate::Matrix).
///
/// `f64` is used for correctness checks, `f32` for timing runs. The wire
/// flag tells the decoder which width a payload carries.
pub trait Real: Float + Default + Debug + Display + Send + Sync + 'static {
    const WIRE_FLAG: u8;
    const BYTES: usize;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn put_le(self, out: &mut alloc::vec::Vec<u8>);
    /// Reads one value from the front of `bytes`, which must hold at least
    /// [`Self::BYTES`] bytes.
    fn get_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const WIRE_FLAG: u8 = 0;
    const BYTES: usize = 4;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn put_le(self, out: &mut alloc::vec::Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn get_le(bytes: &[u8]) -> Self {
        let mut b = [0u8; 4];
        b.copy_from_slice(&bytes[..4]);
        f32::from_le_bytes(b)
    }
}

impl Real for f64 {
    const WIRE_FLAG: u8 = 1;
    const BYTES: usize = 8;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    fn put_le(self, out: &mut alloc::vec::Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn get_le(bytes: &[u8]) -> Self {
        let mut b = [0u8; 8];
        b.copy_from_slice(&bytes[..8]);
        f64::from_le_bytes(b)
    }
}
