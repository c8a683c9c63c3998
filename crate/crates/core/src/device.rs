//! Block devices backing the data, log and backup files.
//!
//! Two backends exist: ordinary files, and an in-memory disk that keeps a
//! separate durable image so a process-internal crash can be simulated by
//! reopening from whatever had reached "stable storage". A shared
//! [`CrashControl`] counts durability events across all devices of one
//! store and freezes the durable images after a chosen event.

use std::fs::{File, OpenOptions};
use std::io;
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

/// Counts durability events and freezes stable storage at a crash point.
#[derive(Debug, Default)]
pub struct CrashControl {
    events: AtomicU64,
    crash_after: AtomicU64,
    armed: AtomicBool,
    frozen: AtomicBool,
}

impl CrashControl {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    /// Freeze durable images right after the `n`-th event (1-based).
    pub fn arm(&self, n: u64) {
        self.crash_after.store(n, Ordering::SeqCst);
        self.armed.store(true, Ordering::SeqCst);
        if n <= self.events.load(Ordering::SeqCst) {
            self.frozen.store(true, Ordering::SeqCst);
        }
    }

    pub fn events(&self) -> u64 {
        self.events.load(Ordering::SeqCst)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen.load(Ordering::SeqCst)
    }

    fn record_event(&self) {
        let n = self.events.fetch_add(1, Ordering::SeqCst) + 1;
        if self.armed.load(Ordering::SeqCst) && n >= self.crash_after.load(Ordering::SeqCst) {
            self.frozen.store(true, Ordering::SeqCst);
        }
    }
}

#[derive(Debug, Default)]
struct MemImage {
    live: Vec<u8>,
    durable: Vec<u8>,
}

/// Shared in-memory disk. Cloning shares the same bytes.
#[derive(Debug, Clone, Default)]
pub struct MemDisk {
    image: Arc<Mutex<MemImage>>,
}

impl MemDisk {
    pub fn new() -> Self {
        Self::default()
    }

    /// A fresh disk holding only the bytes that were durable.
    pub fn crash_image(&self) -> MemDisk {
        let img = self.image.lock().unwrap();
        MemDisk {
            image: Arc::new(Mutex::new(MemImage {
                live: img.durable.clone(),
                durable: img.durable.clone(),
            })),
        }
    }

    pub fn durable_bytes(&self) -> Vec<u8> {
        self.image.lock().unwrap().durable.clone()
    }

    /// Overwrites bytes in both images, bypassing the device layer.
    pub fn poke(&self, off: u64, data: &[u8]) {
        let mut guard = self.image.lock().unwrap();
        let img = &mut *guard;
        for v in [&mut img.live, &mut img.durable] {
            let end = off as usize + data.len();
            if v.len() < end {
                v.resize(end, 0);
            }
            v[off as usize..end].copy_from_slice(data);
        }
    }
}

#[derive(Debug)]
enum Backend {
    Mem(MemDisk),
    File { file: File, path: PathBuf },
}

/// Per-device I/O counters.
#[derive(Debug, Default)]
pub struct IoStats {
    pub reads: AtomicU64,
    pub writes: AtomicU64,
    pub syncs: AtomicU64,
}

#[derive(Debug)]
pub struct Device {
    backend: Backend,
    stats: IoStats,
    delay: Duration,
    crash: Option<Arc<CrashControl>>,
    /// Data and backup devices: each write is an event. Log: each sync.
    event_on_write: bool,
}

fn busy_wait(d: Duration) {
    if d.is_zero() {
        return;
    }
    let start = Instant::now();
    while start.elapsed() < d {
        std::hint::spin_loop();
    }
}

impl Device {
    pub fn memory(disk: MemDisk, event_on_write: bool) -> Self {
        Device {
            backend: Backend::Mem(disk),
            stats: IoStats::default(),
            delay: Duration::ZERO,
            crash: None,
            event_on_write,
        }
    }

    pub fn create_file(path: &Path, event_on_write: bool) -> io::Result<Self> {
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create_new(true)
            .open(path)?;
        Ok(Self::from_file(file, path, event_on_write))
    }

    pub fn open_file(path: &Path, event_on_write: bool) -> io::Result<Self> {
        let file = OpenOptions::new().read(true).write(true).open(path)?;
        Ok(Self::from_file(file, path, event_on_write))
    }

    fn from_file(file: File, path: &Path, event_on_write: bool) -> Self {
        Device {
            backend: Backend::File {
                file,
                path: path.to_path_buf(),
            },
            stats: IoStats::default(),
            delay: Duration::ZERO,
            crash: None,
            event_on_write,
        }
    }

    pub fn with_crash_control(mut self, crash: Arc<CrashControl>) -> Self {
        self.crash = Some(crash);
        self
    }

    pub fn set_delay(&mut self, delay: Duration) {
        self.delay = delay;
    }

    pub fn stats(&self) -> &IoStats {
        &self.stats
    }

    pub fn describe(&self) -> String {
        match &self.backend {
            Backend::Mem(_) => "memory".into(),
            Backend::File { path, .. } => path.display().to_string(),
        }
    }

    fn frozen(&self) -> bool {
        self.crash.as_ref().is_some_and(|c| c.is_frozen())
    }

    fn event(&self) {
        if let Some(c) = &self.crash {
            c.record_event();
        }
    }

    pub fn len(&self) -> u64 {
        match &self.backend {
            Backend::Mem(d) => d.image.lock().unwrap().live.len() as u64,
            Backend::File { file, .. } => file.metadata().map(|m| m.len()).unwrap_or(0),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reads exactly `buf.len()` bytes; short reads are errors.
    pub fn read_at(&self, off: u64, buf: &mut [u8]) -> io::Result<()> {
        busy_wait(self.delay);
        self.stats.reads.fetch_add(1, Ordering::Relaxed);
        match &self.backend {
            Backend::Mem(d) => {
                let img = d.image.lock().unwrap();
                let end = off as usize + buf.len();
                if end > img.live.len() {
                    return Err(io::Error::new(
                        io::ErrorKind::UnexpectedEof,
                        "read past end of device",
                    ));
                }
                buf.copy_from_slice(&img.live[off as usize..end]);
                Ok(())
            }
            Backend::File { file, .. } => file.read_exact_at(buf, off),
        }
    }

    pub fn write_at(&mut self, off: u64, data: &[u8]) -> io::Result<()> {
        busy_wait(self.delay);
        self.stats.writes.fetch_add(1, Ordering::Relaxed);
        let frozen = self.frozen();
        match &mut self.backend {
            Backend::Mem(d) => {
                let mut img = d.image.lock().unwrap();
                let end = off as usize + data.len();
                if img.live.len() < end {
                    img.live.resize(end, 0);
                }
                img.live[off as usize..end].copy_from_slice(data);
                if !frozen {
                    if img.durable.len() < end {
                        img.durable.resize(end, 0);
                    }
                    img.durable[off as usize..end].copy_from_slice(data);
                }
            }
            Backend::File { file, .. } => file.write_all_at(data, off)?,
        }
        if self.event_on_write {
            self.event();
        }
        Ok(())
    }

    pub fn sync(&mut self) -> io::Result<()> {
        self.stats.syncs.fetch_add(1, Ordering::Relaxed);
        if let Backend::File { file, .. } = &self.backend {
            file.sync_data()?;
        }
        if !self.event_on_write {
            self.event();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crash_image_drops_writes_after_freeze() {
        let crash = CrashControl::new();
        let disk = MemDisk::new();
        let mut dev = Device::memory(disk.clone(), true).with_crash_control(crash.clone());
        crash.arm(2);
        dev.write_at(0, b"aaaa").unwrap();
        dev.write_at(4, b"bbbb").unwrap();
        dev.write_at(0, b"cccc").unwrap();
        let mut buf = [0u8; 8];
        dev.read_at(0, &mut buf).unwrap();
        assert_eq!(&buf, b"ccccbbbb");
        assert_eq!(disk.crash_image().durable_bytes(), b"aaaabbbb");
        assert_eq!(crash.events(), 3);
    }

    #[test]
    fn log_style_device_counts_syncs_only() {
        let crash = CrashControl::new();
        let mut dev = Device::memory(MemDisk::new(), false).with_crash_control(crash.clone());
        dev.write_at(0, b"x").unwrap();
        assert_eq!(crash.events(), 0);
        dev.sync().unwrap();
        assert_eq!(crash.events(), 1);
    }

    #[test]
    fn short_read_is_an_error() {
        let dev = Device::memory(MemDisk::new(), true);
        let mut buf = [0u8; 4];
        assert!(dev.read_at(0, &mut buf).is_err());
    }
}
