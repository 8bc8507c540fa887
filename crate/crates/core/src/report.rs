use std::fmt;

use serde::Serialize;

use crate::allocator::ChunkState;
use crate::tagspace::{Tag, TaggedPtr};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FaultKind {
    TagMismatch,
    InvalidFree,
    DoubleFree,
}

impl fmt::Display for FaultKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FaultKind::TagMismatch => "tag-mismatch",
            FaultKind::InvalidFree => "invalid-free",
            FaultKind::DoubleFree => "double-free",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AccessKind {
    Load,
    Store,
    RangeCheck,
    Free,
}

impl fmt::Display for AccessKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AccessKind::Load => "load",
            AccessKind::Store => "store",
            AccessKind::RangeCheck => "range-check",
            AccessKind::Free => "free",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub chunk: u64,
    pub state: ChunkState,
}

/// A detected tag fault.
#[derive(Clone, Debug, PartialEq)]
pub struct FaultReport {
    pub kind: FaultKind,
    pub access: AccessKind,
    /// The pointer word used for the access.
    pub ptr: TaggedPtr,
    pub ptr_tag: Tag,
    /// Shadow tag of the offending granule (the PARTIAL value for partial
    /// granules).
    pub mem_tag: Tag,
    /// First offending byte.
    pub addr: u64,
    pub granule: u64,
    pub provenance: Option<Provenance>,
    pub deferred: bool,
    /// The mismatch came from a partial-granule check.
    pub partial: bool,
}

#[derive(Serialize)]
struct FaultJson {
    kind: FaultKind,
    access: AccessKind,
    ptr: String,
    ptag: String,
    mtag: String,
    chunk: Option<u64>,
    state: Option<ChunkState>,
    deferred: bool,
}

impl FaultReport {
    /// `FAULT kind=.. access=.. ptr=0x.. ptag=0x.. mtag=0x.. chunk=.. state=.. deferred=0|1`
    pub fn to_plain(&self) -> String {
        let (chunk, state) = match self.provenance {
            Some(p) => (p.chunk.to_string(), p.state.to_string()),
            None => ("-".to_owned(), "-".to_owned()),
        };
        format!(
            "FAULT kind={} access={} ptr={} ptag={} mtag={} chunk={} state={} deferred={}",
            self.kind,
            self.access,
            self.ptr,
            self.ptr_tag,
            self.mem_tag,
            chunk,
            state,
            u8::from(self.deferred)
        )
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(FaultJson {
            kind: self.kind,
            access: self.access,
            ptr: self.ptr.to_string(),
            ptag: self.ptr_tag.to_string(),
            mtag: self.mem_tag.to_string(),
            chunk: self.provenance.map(|p| p.chunk),
            state: self.provenance.map(|p| p.state),
            deferred: self.deferred,
        })
        .expect("fault report serializes")
    }
}

impl fmt::Display for FaultReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_plain())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tagspace::MtConfig;

    fn sample(provenance: Option<Provenance>) -> FaultReport {
        let cfg = MtConfig::hwasan();
        FaultReport {
            kind: FaultKind::TagMismatch,
            access: AccessKind::Store,
            ptr: TaggedPtr::pack(0x1000_0010, cfg.tag(0xab).unwrap(), &cfg).unwrap(),
            ptr_tag: cfg.tag(0xab).unwrap(),
            mem_tag: cfg.tag(0x3).unwrap(),
            addr: 0x1000_0010,
            granule: 0x1000_0010,
            provenance,
            deferred: true,
            partial: false,
        }
    }

    #[test]
    fn plain_golden() {
        let r = sample(Some(Provenance {
            chunk: 2,
            state: ChunkState::Live,
        }));
        assert_eq!(
            r.to_plain(),
            "FAULT kind=tag-mismatch access=store ptr=0xab00000010000010 ptag=0xab mtag=0x3 chunk=2 state=live deferred=1"
        );
        assert_eq!(
            sample(None).to_plain(),
            "FAULT kind=tag-mismatch access=store ptr=0xab00000010000010 ptag=0xab mtag=0x3 chunk=- state=- deferred=1"
        );
    }

    #[test]
    fn json_golden() {
        let r = sample(Some(Provenance {
            chunk: 2,
            state: ChunkState::Quarantined,
        }));
        assert_eq!(
            r.to_json().to_string(),
            r#"{"kind":"tag-mismatch","access":"store","ptr":"0xab00000010000010","ptag":"0xab","mtag":"0x3","chunk":2,"state":"quarantined","deferred":true}"#
        );
        assert_eq!(
            sample(None).to_json().to_string(),
            r#"{"kind":"tag-mismatch","access":"store","ptr":"0xab00000010000010","ptag":"0xab","mtag":"0x3","chunk":null,"state":null,"deferred":true}"#
        );
    }
}
