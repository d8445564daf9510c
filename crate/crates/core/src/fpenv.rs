//! Scoped flush-to-zero for subnormal floats.
//!
//! Saturated softmax rows produce subnormal probabilities whose products are
//! very slow on x86. The guard sets the FTZ and DAZ bits of the SSE control
//! register and restores the previous state on drop. On other targets it does
//! nothing.

#[derive(Debug)]
#[must_use = "the previous mode is restored when the guard drops"]
pub struct FlushDenormals {
    #[allow(dead_code)]
    saved: u32,
}

#[cfg(target_arch = "x86_64")]
mod imp {
    use std::arch::asm;

    const FTZ_DAZ: u32 = 0x8040;

    pub fn read() -> u32 {
        let mut v: u32 = 0;
        // SAFETY: stores the 32-bit control register into a valid local.
        unsafe { asm!("stmxcsr [{}]", in(reg) &mut v, options(nostack, preserves_flags)) };
        v
    }

    pub fn write(v: u32) {
        // SAFETY: loads a value previously read from the register, or one with
        // only the FTZ/DAZ bits added; both are valid control words.
        unsafe { asm!("ldmxcsr [{}]", in(reg) &v, options(nostack, preserves_flags)) };
    }

    pub fn enable(v: u32) -> u32 {
        v | FTZ_DAZ
    }
}

#[cfg(not(target_arch = "x86_64"))]
mod imp {
    pub fn read() -> u32 {
        0
    }

    pub fn write(_: u32) {}

    pub fn enable(v: u32) -> u32 {
        v
    }
}

impl FlushDenormals {
    /// Enables flushing on the current thread until the guard drops.
    pub fn enable() -> Self {
        let saved = imp::read();
        imp::write(imp::enable(saved));
        Self { saved }
    }
}

impl Drop for FlushDenormals {
    fn drop(&mut self) {
        imp::write(self.saved);
    }
}
