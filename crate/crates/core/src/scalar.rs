// SPDX-License-Identifier: Apache-2.0

//! Floating-point scalar abstraction for the numeric modules.

use std::fmt::{Debug, Display};

use num_traits::{Float, NumAssignOps};

/// A float that can be stored in device memory as little-endian bytes.
pub trait Scalar: Float + NumAssignOps + Copy + Send + Sync + Debug + Display + 'static {
    const WIDTH: usize;

    fn write_le(self, out: &mut Vec<u8>);

    /// `bytes` must hold exactly `WIDTH` bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

macro_rules! scalar_impl {
    ($($t:ty)*) => ($(
        impl Scalar for $t {
            const WIDTH: usize = std::mem::size_of::<$t>();

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("scalar width"))
            }
        }
    )*)
}

scalar_impl!(f32 f64);

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip<T: Scalar>(v: T) -> T {
        let mut buf = Vec::new();
        v.write_le(&mut buf);
        assert_eq!(buf.len(), T::WIDTH);
        T::read_le(&buf)
    }

    #[test]
    fn le_roundtrip() {
        assert_eq!(roundtrip(1.5f32), 1.5);
        assert_eq!(roundtrip(-0.1f64), -0.1);
    }
}
