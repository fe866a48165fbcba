//! C ABI for memgraft banks, hashing and CKA.
//!
//! Every fallible call returns an [`MgStatus`]. On failure a message is
//! kept per thread and read back with [`mg_last_error_message`]. Handles are
//! opaque and must be released with their `_free` function.
#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use memgraft::bank::{bank_stats, read_bank, MemoryBank};
use memgraft::corpus::TokenSequence;
use memgraft::diagnostics::linear_cka;
use memgraft::fallback::HashScheme;
use memgraft::numerics::Matrix;
use memgraft::Error;

/// Status of a call. Zero is success.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    Config = 6,
    Invariant = 7,
    Panic = 8,
}

impl From<&Error> for MgStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Io { .. } => MgStatus::Io,
            Error::Parse { .. }
            | Error::BadMagic { .. }
            | Error::UnsupportedVersion { .. }
            | Error::Truncated(_)
            | Error::Checksum { .. }
            | Error::DuplicateKey(_) => MgStatus::Format,
            Error::Shape(_) | Error::NonFinite(_) | Error::EmptyCorpus => MgStatus::Shape,
            Error::Config(_) | Error::MissingKey(_) => MgStatus::Config,
            Error::StaleRecord { .. } | Error::Invariant(_) => MgStatus::Invariant,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(status: MgStatus, msg: impl Into<String>) -> MgStatus {
    set_error(msg);
    status
}

/// Run `f`, turning errors and panics into a status plus message.
fn guard(f: impl FnOnce() -> Result<(), MgStatus>) -> MgStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MgStatus::Ok,
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(MgStatus::Panic, msg)
        }
    }
}

fn lift<T>(r: memgraft::Result<T>) -> Result<T, MgStatus> {
    r.map_err(|e| fail(MgStatus::from(&e), e.to_string()))
}

unsafe fn input<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], MgStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(MgStatus::NullPointer, format!("{what} is null")));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn output<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], MgStatus> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(fail(MgStatus::NullPointer, format!("{what} is null")));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, MgStatus> {
    p.as_mut()
        .ok_or_else(|| fail(MgStatus::NullPointer, format!("{what} is null")))
}

/// Message for the last failed call on this thread, or null. The pointer
/// stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn mg_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Opaque handle to a loaded memory bank.
pub struct MgBank {
    bank: MemoryBank,
}

/// Result of one lookup. `order` is zero and `row` undefined on a miss.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MgMatch {
    pub hit: bool,
    pub order: u8,
    pub row: u32,
}

impl From<memgraft::bank::LookupResult> for MgMatch {
    fn from(r: memgraft::bank::LookupResult) -> Self {
        match r.0 {
            Some(m) => MgMatch {
                hit: true,
                order: m.order,
                row: m.row,
            },
            None => MgMatch::default(),
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct MgBankInfo {
    pub entries: u64,
    pub d_mem: u64,
    pub max_order: u64,
    /// Size of the bank file in bytes.
    pub total_bytes: u64,
}

/// Load a bank file. On success `*out` owns a handle.
#[no_mangle]
pub unsafe extern "C" fn mg_bank_open(path: *const c_char, out: *mut *mut MgBank) -> MgStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = ptr::null_mut();
        if path.is_null() {
            return Err(fail(MgStatus::NullPointer, "path is null"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| fail(MgStatus::InvalidArgument, "path is not UTF-8"))?;
        let bank = lift(read_bank(Path::new(path)))?;
        *out = Box::into_raw(Box::new(MgBank { bank }));
        Ok(())
    })
}

/// Release a handle. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn mg_bank_free(bank: *mut MgBank) {
    if !bank.is_null() {
        drop(Box::from_raw(bank));
    }
}

unsafe fn bank_ref<'a>(bank: *const MgBank) -> Result<&'a MemoryBank, MgStatus> {
    bank.as_ref()
        .map(|b| &b.bank)
        .ok_or_else(|| fail(MgStatus::NullPointer, "bank is null"))
}

#[no_mangle]
pub unsafe extern "C" fn mg_bank_info(bank: *const MgBank, out: *mut MgBankInfo) -> MgStatus {
    guard(|| {
        let b = bank_ref(bank)?;
        let stats = bank_stats(b);
        *out_ref(out, "out")? = MgBankInfo {
            entries: stats.entries,
            d_mem: b.d_mem() as u64,
            max_order: b.max_order() as u64,
            total_bytes: stats.total_bytes,
        };
        Ok(())
    })
}

/// Longest match for the suffix of `context[0..len]`.
#[no_mangle]
pub unsafe extern "C" fn mg_bank_lookup(
    bank: *const MgBank,
    context: *const u32,
    len: usize,
    out: *mut MgMatch,
) -> MgStatus {
    guard(|| {
        let b = bank_ref(bank)?;
        let ctx = input(context, len, "context")?;
        *out_ref(out, "out")? = b.exact_lookup(ctx).into();
        Ok(())
    })
}

/// Lookups at every position of a token stream. `doc_starts` lists the
/// first index of each document and must begin with 0; pass `n_docs = 0`
/// for a single document. `out` must hold `n` entries.
#[no_mangle]
pub unsafe extern "C" fn mg_bank_batch_lookup(
    bank: *const MgBank,
    ids: *const u32,
    n: usize,
    doc_starts: *const usize,
    n_docs: usize,
    out: *mut MgMatch,
) -> MgStatus {
    guard(|| {
        let b = bank_ref(bank)?;
        let seq = sequence(ids, n, doc_starts, n_docs)?;
        let out = output(out, n, "out")?;
        for (o, r) in out.iter_mut().zip(b.batch_lookup(&seq)) {
            *o = r.into();
        }
        Ok(())
    })
}

unsafe fn sequence(ids: *const u32, n: usize, doc_starts: *const usize, n_docs: usize) -> Result<TokenSequence, MgStatus> {
    let ids = input(ids, n, "ids")?;
    if n == 0 {
        return Err(fail(MgStatus::Shape, "empty token stream"));
    }
    let starts = input(doc_starts, n_docs, "doc_starts")?;
    if starts.is_empty() {
        return Ok(TokenSequence::single(ids.to_vec()));
    }
    if starts[0] != 0 || starts.windows(2).any(|w| w[0] >= w[1]) || starts[starts.len() - 1] >= n {
        return Err(fail(
            MgStatus::InvalidArgument,
            "doc_starts must begin at 0 and increase strictly below n",
        ));
    }
    let ends = starts[1..].iter().copied().chain([n]);
    lift(TokenSequence::from_docs(
        starts.iter().zip(ends).map(|(&s, e)| ids[s..e].to_vec()),
    ))
}

/// Decode row `row` into `out[0..len]`; `len` must equal the bank's `d_mem`.
#[no_mangle]
pub unsafe extern "C" fn mg_bank_row(bank: *const MgBank, row: u32, out: *mut f32, len: usize) -> MgStatus {
    guard(|| {
        let b = bank_ref(bank)?;
        if row as usize >= b.len() {
            return Err(fail(
                MgStatus::InvalidArgument,
                format!("row {row} out of range for {} entries", b.len()),
            ));
        }
        if len != b.d_mem() {
            return Err(fail(
                MgStatus::Shape,
                format!("row buffer holds {len} values, bank rows have {}", b.d_mem()),
            ));
        }
        let out = output(out, len, "out")?;
        for (o, v) in out.iter_mut().zip(b.row(row as usize)) {
            *o = v as f32;
        }
        Ok(())
    })
}

/// Seeded hash of an id sequence, as used for synthetic embeddings.
#[no_mangle]
pub unsafe extern "C" fn mg_hash_ids(seed: u64, ids: *const u32, len: usize) -> u64 {
    if ids.is_null() || len == 0 {
        return memgraft::hash::hash_ids(seed, &[]);
    }
    memgraft::hash::hash_ids(seed, slice::from_raw_parts(ids, len))
}

#[no_mangle]
pub extern "C" fn mg_mix64(x: u64) -> u64 {
    memgraft::hash::mix64(x)
}

/// Fallback table rows for every position of a token stream, position-major
/// with `n_orders · heads` entries per position. `out` must hold that many
/// times `n`.
#[no_mangle]
pub unsafe extern "C" fn mg_fallback_addresses(
    orders: *const usize,
    n_orders: usize,
    heads: usize,
    table_size: u32,
    seed: u64,
    ids: *const u32,
    n: usize,
    doc_starts: *const usize,
    n_docs: usize,
    out: *mut u32,
    out_len: usize,
) -> MgStatus {
    guard(|| {
        let orders = input(orders, n_orders, "orders")?;
        let scheme = lift(HashScheme::new(orders, heads, table_size, seed))?;
        let seq = sequence(ids, n, doc_starts, n_docs)?;
        let need = n * scheme.num_tables();
        if out_len != need {
            return Err(fail(
                MgStatus::Shape,
                format!("address buffer holds {out_len} values, need {need}"),
            ));
        }
        output(out, out_len, "out")?.copy_from_slice(&scheme.address_sequence(&seq));
        Ok(())
    })
}

/// Linear CKA of two row-major matrices sharing `rows`.
#[no_mangle]
pub unsafe extern "C" fn mg_linear_cka(
    x: *const f64,
    rows: usize,
    x_cols: usize,
    y: *const f64,
    y_cols: usize,
    out: *mut f64,
) -> MgStatus {
    guard(|| {
        let xs = input(x, rows * x_cols, "x")?;
        let ys = input(y, rows * y_cols, "y")?;
        let xm = lift(Matrix::from_vec(rows, x_cols, xs.to_vec()))?;
        let ym = lift(Matrix::from_vec(rows, y_cols, ys.to_vec()))?;
        *out_ref(out, "out")? = lift(linear_cka(&xm, &ym))?;
        Ok(())
    })
}
