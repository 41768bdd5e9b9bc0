//! Probe backend that issues real flush and load instructions on 64-bit
//! x86 Linux, timed with the cycle counter. Built only with the `hw`
//! feature. Nothing here feeds the simulator checks: every number depends
//! on the machine the process runs on, so results are for side-by-side
//! plotting, not assertions.

use std::path::PathBuf;

/// Where and how the hardware backend measures.
#[derive(Debug, Clone)]
pub struct HwBackendConfig {
    /// File to map read-only and shared, the layout a cross-process probe
    /// needs (both sides resolve to the same physical lines). `None` maps
    /// an anonymous shared buffer, enough for single-process calibration.
    pub region: Option<PathBuf>,
    /// Bytes to map, rounded up to whole pages.
    pub len: usize,
    /// Calibration repetitions the caller should request per cluster.
    pub rounds: u32,
    /// Pin the measuring thread at construction; `None` leaves affinity
    /// alone.
    pub pin_core: Option<usize>,
}

impl Default for HwBackendConfig {
    fn default() -> Self {
        HwBackendConfig {
            region: None,
            len: 2 << 20,
            rounds: 10_000,
            pin_core: None,
        }
    }
}

#[cfg(all(target_arch = "x86_64", target_os = "linux"))]
mod imp {
    use std::arch::x86_64::{__cpuid, _mm_clflush, _mm_mfence, _rdtsc};
    use std::ffi::CString;
    use std::os::unix::ffi::OsStrExt;

    use super::HwBackendConfig;
    use crate::probes::{ProbeBackend, ProbeError};

    /// One measuring thread's view of a mapped region. Addresses given to
    /// the probe operations are byte offsets into that mapping. Instances
    /// must not share a target line while measuring; give each thread its
    /// own offset range.
    pub struct HwBackend {
        base: *mut u8,
        len: usize,
        n_cores: usize,
    }

    fn last_os_error(what: &str) -> ProbeError {
        ProbeError::Backend(format!("{what}: {}", std::io::Error::last_os_error()))
    }

    impl HwBackend {
        pub fn new(cfg: &HwBackendConfig) -> Result<Self, ProbeError> {
            let page = unsafe { libc::sysconf(libc::_SC_PAGESIZE) } as usize;
            let len = cfg.len.max(1).div_ceil(page) * page;
            let base = match &cfg.region {
                Some(path) => {
                    let cpath = CString::new(path.as_os_str().as_bytes())
                        .map_err(|_| ProbeError::Backend("NUL in region path".into()))?;
                    let fd = unsafe { libc::open(cpath.as_ptr(), libc::O_RDONLY) };
                    if fd < 0 {
                        return Err(last_os_error("open region file"));
                    }
                    let mut st = std::mem::MaybeUninit::<libc::stat>::uninit();
                    if unsafe { libc::fstat(fd, st.as_mut_ptr()) } != 0 {
                        let e = last_os_error("stat region file");
                        unsafe { libc::close(fd) };
                        return Err(e);
                    }
                    let size = unsafe { st.assume_init() }.st_size as usize;
                    if size < len {
                        unsafe { libc::close(fd) };
                        return Err(ProbeError::Backend(format!(
                            "region file holds {size} bytes, need {len}"
                        )));
                    }
                    let p = unsafe {
                        libc::mmap(
                            std::ptr::null_mut(),
                            len,
                            libc::PROT_READ,
                            libc::MAP_SHARED,
                            fd,
                            0,
                        )
                    };
                    unsafe { libc::close(fd) };
                    if p == libc::MAP_FAILED {
                        return Err(last_os_error("map region file"));
                    }
                    p as *mut u8
                }
                None => {
                    let p = unsafe {
                        libc::mmap(
                            std::ptr::null_mut(),
                            len,
                            libc::PROT_READ | libc::PROT_WRITE,
                            libc::MAP_SHARED | libc::MAP_ANONYMOUS,
                            -1,
                            0,
                        )
                    };
                    if p == libc::MAP_FAILED {
                        return Err(last_os_error("map anonymous region"));
                    }
                    // Touch every page so later probes measure the cache,
                    // not first-fault handling.
                    for off in (0..len).step_by(page) {
                        unsafe { std::ptr::write_volatile(p.add(off) as *mut u8, 0) };
                    }
                    p as *mut u8
                }
            };
            let online = unsafe { libc::sysconf(libc::_SC_NPROCESSORS_ONLN) };
            let mut backend = HwBackend {
                base,
                len,
                n_cores: if online > 0 { online as usize } else { 1 },
            };
            if let Some(core) = cfg.pin_core {
                backend.pin_to_core(core)?;
            }
            Ok(backend)
        }

        fn ptr(&self, addr: u64) -> Result<*mut u8, ProbeError> {
            if addr + 64 > self.len as u64 {
                return Err(ProbeError::Backend(format!(
                    "offset {addr:#x} outside the {} byte mapping",
                    self.len
                )));
            }
            Ok(unsafe { self.base.add(addr as usize) })
        }
    }

    impl Drop for HwBackend {
        fn drop(&mut self) {
            unsafe { libc::munmap(self.base as *mut libc::c_void, self.len) };
        }
    }

    // The mapping is owned by this instance alone.
    unsafe impl Send for HwBackend {}

    #[inline]
    fn fenced_rdtsc() -> u64 {
        // cpuid drains the pipeline before the timestamp; mfence alone
        // does not order rdtsc.
        unsafe {
            __cpuid(0);
            _rdtsc()
        }
    }

    impl ProbeBackend for HwBackend {
        fn timed_access(&mut self, addr: u64) -> Result<u64, ProbeError> {
            let p = self.ptr(addr)?;
            unsafe {
                _mm_mfence();
                let t0 = fenced_rdtsc();
                std::ptr::read_volatile(p);
                _mm_mfence();
                let t1 = fenced_rdtsc();
                Ok(t1.saturating_sub(t0))
            }
        }

        fn timed_flush(&mut self, addr: u64) -> Result<u64, ProbeError> {
            let p = self.ptr(addr)?;
            unsafe {
                _mm_mfence();
                let t0 = fenced_rdtsc();
                _mm_clflush(p);
                _mm_mfence();
                let t1 = fenced_rdtsc();
                Ok(t1.saturating_sub(t0))
            }
        }

        fn plain_access(&mut self, addr: u64) -> Result<(), ProbeError> {
            let p = self.ptr(addr)?;
            unsafe { std::ptr::read_volatile(p) };
            Ok(())
        }

        fn plain_flush(&mut self, addr: u64) -> Result<(), ProbeError> {
            let p = self.ptr(addr)?;
            unsafe {
                _mm_clflush(p);
                _mm_mfence();
            }
            Ok(())
        }

        fn serialize(&mut self) {
            unsafe {
                _mm_mfence();
                __cpuid(0);
            }
        }

        fn pin_to_core(&mut self, core: usize) -> Result<(), ProbeError> {
            if core >= self.n_cores {
                return Err(ProbeError::Backend(format!(
                    "core {core} out of range, {} online",
                    self.n_cores
                )));
            }
            unsafe {
                let mut set = std::mem::zeroed::<libc::cpu_set_t>();
                libc::CPU_SET(core, &mut set);
                if libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set) != 0 {
                    return Err(last_os_error("pin thread"));
                }
            }
            Ok(())
        }

        fn n_cores(&self) -> usize {
            self.n_cores
        }

        fn current_core(&self) -> usize {
            let c = unsafe { libc::sched_getcpu() };
            if c < 0 {
                0
            } else {
                c as usize
            }
        }
    }
}

#[cfg(all(target_arch = "x86_64", target_os = "linux"))]
pub use imp::HwBackend;

#[cfg(not(all(target_arch = "x86_64", target_os = "linux")))]
mod imp {
    use super::HwBackendConfig;
    use crate::probes::ProbeError;

    /// Placeholder on platforms without clflush and rdtsc; construction
    /// always reports the capability gap.
    pub struct HwBackend {
        _priv: (),
    }

    impl HwBackend {
        pub fn new(_cfg: &HwBackendConfig) -> Result<Self, ProbeError> {
            Err(ProbeError::Backend(
                "hardware timing needs a 64-bit x86 Linux build".into(),
            ))
        }
    }
}

#[cfg(not(all(target_arch = "x86_64", target_os = "linux")))]
pub use imp::HwBackend;

/// True when this build can construct a working hardware backend. The CLI
/// uses it to fall back to the simulator with a warning instead of dying.
pub fn supported() -> bool {
    cfg!(all(target_arch = "x86_64", target_os = "linux"))
}
