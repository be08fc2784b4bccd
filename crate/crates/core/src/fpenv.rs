//! Floating-point environment control.

#[cfg(target_arch = "x86_64")]
const FTZ_DAZ: u32 = 0x8040;

/// While alive, subnormal operands and results are flushed to zero on the
/// current thread. The previous mode is restored on drop.
///
/// Saturated sigmoid outputs send subnormal gradients back through every conv
/// layer, and x86 handles those through a slow microcode path.
pub struct FlushToZero {
    #[cfg(target_arch = "x86_64")]
    saved: u32,
}

impl FlushToZero {
    #[allow(deprecated)]
    pub fn new() -> Self {
        #[cfg(target_arch = "x86_64")]
        {
            use std::arch::x86_64::{_mm_getcsr, _mm_setcsr};
            // SAFETY: SSE is part of the x86_64 baseline; only the FTZ and DAZ bits change.
            let saved = unsafe { _mm_getcsr() };
            unsafe { _mm_setcsr(saved | FTZ_DAZ) };
            FlushToZero { saved }
        }
        #[cfg(not(target_arch = "x86_64"))]
        FlushToZero {}
    }
}

impl Default for FlushToZero {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for FlushToZero {
    #[allow(deprecated)]
    fn drop(&mut self) {
        #[cfg(target_arch = "x86_64")]
        // SAFETY: restores the value read in `new`.
        unsafe {
            std::arch::x86_64::_mm_setcsr(self.saved)
        };
    }
}

#[cfg(all(test, target_arch = "x86_64"))]
mod tests {
    use super::*;
    use std::hint::black_box;

    #[test]
    fn subnormals_flushed_only_inside_scope() {
        let half = || black_box(f32::MIN_POSITIVE) / black_box(2.0f32);
        assert!(half().is_subnormal());
        {
            let _g = FlushToZero::new();
            assert_eq!(half(), 0.0);
            let _inner = FlushToZero::new();
        }
        assert!(half().is_subnormal());
    }
}
