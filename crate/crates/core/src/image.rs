//! The SIPB container: a fixed 40-byte little-endian header followed by the
//! code and initial data sections.
//!
//! ```text
//!  0  magic "SIPB"
//!  4  version        u32 (= 1)
//!  8  entry          u32
//! 12  code_size      u32
//! 16  data_size      u32
//! 20  d_capacity     u64
//! 28  stack_reserve  u64
//! 36  reserved       u32 (= 0)
//! 40  code bytes, then data bytes
//! ```

use thiserror::Error;

use crate::isa::MAGIC;

pub const SIPB_MAGIC: [u8; 4] = *b"SIPB";
pub const SIPB_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 40;

/// Bytes the loader appends after the code: a cfi_label and the syscall gate.
pub const TRAMPOLINE_LEN: u64 = 10;
pub const PAGE_SIZE: u64 = 4096;

/// Size of region C the loader allocates for `code_len` bytes of code.
///
/// The loader layout is a fixed function of the code size so that the
/// assembler can resolve `rip`-relative references to data without
/// relocations.
pub fn code_region_size(code_len: u64) -> u64 {
    (code_len + TRAMPOLINE_LEN).div_ceil(PAGE_SIZE) * PAGE_SIZE
}

/// Distance from the start of C to the start of D (C, then the G1 guard).
pub fn data_offset(code_len: u64) -> u64 {
    code_region_size(code_len) + PAGE_SIZE
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SipbImage {
    pub version: u32,
    pub code: Vec<u8>,
    pub data: Vec<u8>,
    pub entry: u32,
    pub d_capacity: u64,
    pub stack_reserve: u64,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    BadVersion(u32),
    #[error("truncated section: {0}")]
    TruncatedSection(&'static str),
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
}

impl SipbImage {
    pub fn new(code: Vec<u8>, data: Vec<u8>, entry: u32, d_capacity: u64, stack_reserve: u64) -> Self {
        SipbImage {
            version: SIPB_VERSION,
            code,
            data,
            entry,
            d_capacity,
            stack_reserve,
        }
    }

    /// Structural bounds that every image must satisfy to be loadable at all.
    pub fn check_bounds(&self) -> Result<(), FormatError> {
        let bad = |m: String| Err(FormatError::InvariantViolation(m));
        if u32::try_from(self.code.len()).is_err() || u32::try_from(self.data.len()).is_err() {
            return bad("section larger than 4 GiB".into());
        }
        if self.entry as usize >= self.code.len() {
            return bad(format!(
                "entry {:#x} outside code of {} bytes",
                self.entry,
                self.code.len()
            ));
        }
        let data_len = self.data.len() as u64;
        if data_len > self.d_capacity {
            return bad(format!(
                "data size {} exceeds d_capacity {}",
                data_len, self.d_capacity
            ));
        }
        if self.stack_reserve > self.d_capacity - data_len {
            return bad(format!(
                "stack reserve {} exceeds free data capacity {}",
                self.stack_reserve,
                self.d_capacity - data_len
            ));
        }
        Ok(())
    }

    pub fn entry_is_label(&self) -> bool {
        let e = self.entry as usize;
        self.code.get(e..e + MAGIC.len()) == Some(&MAGIC[..])
    }

    /// All invariants, including that the entry point is a cfi_label.
    pub fn validate(&self) -> Result<(), FormatError> {
        if self.version != SIPB_VERSION {
            return Err(FormatError::BadVersion(self.version));
        }
        self.check_bounds()?;
        if !self.entry_is_label() {
            return Err(FormatError::InvariantViolation(format!(
                "entry {:#x} is not a cfi_label",
                self.entry
            )));
        }
        Ok(())
    }
}

pub fn write_image(img: &SipbImage) -> Result<Vec<u8>, FormatError> {
    img.validate()?;
    let mut out = Vec::with_capacity(HEADER_LEN + img.code.len() + img.data.len());
    out.extend_from_slice(&SIPB_MAGIC);
    out.extend_from_slice(&img.version.to_le_bytes());
    out.extend_from_slice(&img.entry.to_le_bytes());
    out.extend_from_slice(&(img.code.len() as u32).to_le_bytes());
    out.extend_from_slice(&(img.data.len() as u32).to_le_bytes());
    out.extend_from_slice(&img.d_capacity.to_le_bytes());
    out.extend_from_slice(&img.stack_reserve.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&img.code);
    out.extend_from_slice(&img.data);
    Ok(out)
}

pub fn read_image(bytes: &[u8]) -> Result<SipbImage, FormatError> {
    if bytes.len() < 4 {
        return Err(FormatError::TruncatedSection("header"));
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != SIPB_MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    if bytes.len() < HEADER_LEN {
        return Err(FormatError::TruncatedSection("header"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());

    let version = u32_at(4);
    if version != SIPB_VERSION {
        return Err(FormatError::BadVersion(version));
    }
    let entry = u32_at(8);
    let code_size = u32_at(12) as usize;
    let data_size = u32_at(16) as usize;
    let d_capacity = u64_at(20);
    let stack_reserve = u64_at(28);
    if u32_at(36) != 0 {
        return Err(FormatError::InvariantViolation(
            "reserved header field is nonzero".into(),
        ));
    }
    let code_end = HEADER_LEN + code_size;
    if bytes.len() < code_end {
        return Err(FormatError::TruncatedSection("code"));
    }
    let data_end = code_end + data_size;
    if bytes.len() < data_end {
        return Err(FormatError::TruncatedSection("data"));
    }
    if bytes.len() > data_end {
        return Err(FormatError::InvariantViolation(format!(
            "{} trailing bytes after data",
            bytes.len() - data_end
        )));
    }
    let img = SipbImage {
        version,
        code: bytes[HEADER_LEN..code_end].to_vec(),
        data: bytes[code_end..data_end].to_vec(),
        entry,
        d_capacity,
        stack_reserve,
    };
    img.validate()?;
    Ok(img)
}
