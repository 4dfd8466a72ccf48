use serde::{Deserialize, Serialize};

use crate::image::{code_region_size, data_offset, SipbImage, PAGE_SIZE, TRAMPOLINE_LEN};
use crate::isa::MAGIC;

/// Every domain lives in its own slot; slot `k` starts at `(k + 1) * SLOT_SIZE`.
pub const SLOT_SIZE: u64 = 16 * 1024 * 1024;
pub const GUARD_BYTES: u64 = PAGE_SIZE;

/// Addresses of one domain's regions. All ranges are half-open.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainLayout {
    pub domain_id: u32,
    pub c_begin: u64,
    pub c_end: u64,
    pub d_begin: u64,
    pub d_end: u64,
    /// Length of the image's code; the trampoline follows it.
    pub code_len: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    Code,
    Guard1,
    Data,
    Guard2,
}

impl DomainLayout {
    /// Layout of `img` in slot `slot` (0-based).
    pub fn for_image(img: &SipbImage, slot: u64, domain_id: u32) -> Option<DomainLayout> {
        let code_len = img.code.len() as u64;
        let c_begin = (slot + 1).checked_mul(SLOT_SIZE)?;
        let c_end = c_begin + code_region_size(code_len);
        let d_begin = c_begin + data_offset(code_len);
        let d_end = d_begin.checked_add(img.d_capacity)?;
        if d_end.checked_add(GUARD_BYTES)? > c_begin + SLOT_SIZE {
            return None;
        }
        Some(DomainLayout {
            domain_id,
            c_begin,
            c_end,
            d_begin,
            d_end,
            code_len,
        })
    }

    pub fn g1(&self) -> (u64, u64) {
        (self.c_end, self.c_end + GUARD_BYTES)
    }

    pub fn g2(&self) -> (u64, u64) {
        (self.d_end, self.d_end + GUARD_BYTES)
    }

    pub fn trampoline(&self) -> u64 {
        self.c_begin + self.code_len
    }

    /// Address of the syscall gate inside the trampoline.
    pub fn gate(&self) -> u64 {
        self.trampoline() + 8
    }

    pub fn slot_end(&self) -> u64 {
        self.c_begin + SLOT_SIZE
    }

    pub fn region_of(&self, addr: u64) -> Option<Region> {
        if (self.c_begin..self.c_end).contains(&addr) {
            Some(Region::Code)
        } else if (self.c_end..self.d_begin).contains(&addr) {
            Some(Region::Guard1)
        } else if (self.d_begin..self.d_end).contains(&addr) {
            Some(Region::Data)
        } else if (self.d_end..self.d_end + GUARD_BYTES).contains(&addr) {
            Some(Region::Guard2)
        } else {
            None
        }
    }

    pub fn in_code(&self, addr: u64) -> bool {
        (self.c_begin..self.c_end).contains(&addr)
    }

    /// Whether `[addr, addr + len)` lies inside D.
    pub fn data_contains(&self, addr: u64, len: u64) -> bool {
        addr >= self.d_begin && addr.checked_add(len).is_some_and(|e| e <= self.d_end)
    }

    /// The 8-byte value of this domain's cfi_label, as held in bnd1.
    pub fn label_value(&self) -> u64 {
        let mut b = [0u8; 8];
        b[..4].copy_from_slice(&MAGIC);
        b[4..].copy_from_slice(&self.domain_id.to_le_bytes());
        u64::from_le_bytes(b)
    }
}

/// The bytes of region C after loading: code with rewritten label IDs, the
/// trampoline, then zero fill to the region end.
pub fn load_code(img: &SipbImage, layout: &DomainLayout) -> Vec<u8> {
    load_code_with(img, layout, true)
}

/// `patch_ids = false` leaves the image bytes untouched, for uninstrumented
/// programs whose immediates may contain the label prefix.
pub(crate) fn load_code_with(img: &SipbImage, layout: &DomainLayout, patch_ids: bool) -> Vec<u8> {
    let mut code = img.code.clone();
    let labels = if patch_ids {
        crate::isa::scan_cfi_labels(&img.code)
    } else {
        Vec::new()
    };
    for off in labels {
        let o = off as usize + 4;
        if o + 4 <= code.len() {
            code[o..o + 4].copy_from_slice(&layout.domain_id.to_le_bytes());
        }
    }
    code.extend_from_slice(&MAGIC);
    code.extend_from_slice(&layout.domain_id.to_le_bytes());
    code.extend_from_slice(&[0x0F, 0x05]);
    debug_assert_eq!(code.len() as u64, layout.code_len + TRAMPOLINE_LEN);
    code.resize((layout.c_end - layout.c_begin) as usize, 0);
    code
}
