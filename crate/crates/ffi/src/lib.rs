//! C ABI over the `bmb` memory bank, pseudo-label ledger, weighting
//! functions and training harness.
//!
//! Every fallible call returns a [`BmbStatus`]. On failure a message is kept
//! per thread and can be read with [`bmb_last_error`]. Handles are opaque and
//! must be released with their `_free` function. Sizes are `size_t`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use bmb::estimator::PseudoLabelLedger;
use bmb::membank::{FeatureRecord, MemoryBank, SourceView};
use bmb::rng::{stream, Stream, StreamRng};
use bmb::{config, data, weighting, Error};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BmbStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Empty = 3,
    ConfigError = 4,
    Diverged = 5,
    IoError = 6,
    Panic = 7,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(err: &Error) -> BmbStatus {
    match err {
        Error::Config { .. } => BmbStatus::ConfigError,
        Error::Diverged { .. } => BmbStatus::Diverged,
        Error::Empty(_) => BmbStatus::Empty,
        Error::Io(_) | Error::Csv(_) => BmbStatus::IoError,
        _ => BmbStatus::InvalidArgument,
    }
}

struct Fail(BmbStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(BmbStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> BmbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            BmbStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            BmbStatus::Panic
        }
    }
}

unsafe fn slice_in<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn slice_out<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn write_out<T>(p: *mut T, v: T, what: &str) -> Result<(), Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    p.write(v);
    Ok(())
}

unsafe fn str_in<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(BmbStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

fn copy_counts(src: &[usize], dst: &mut [usize]) -> Result<(), Fail> {
    if dst.len() != src.len() {
        return Err(Fail(
            BmbStatus::InvalidArgument,
            format!("output holds {} entries, need {}", dst.len(), src.len()),
        ));
    }
    dst.copy_from_slice(src);
    Ok(())
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn bmb_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn bmb_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Memory bank with its own seeded random stream and a fixed feature width.
pub struct BmbMemoryBank {
    bank: MemoryBank,
    rng: StreamRng,
    feature_dim: usize,
}

/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn bmb_bank_new(
    num_classes: usize,
    capacity: usize,
    beta: f64,
    feature_dim: usize,
    seed: u64,
    out: *mut *mut BmbMemoryBank,
) -> BmbStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let bank = MemoryBank::new(num_classes, capacity, beta)?;
        let handle = Box::new(BmbMemoryBank {
            bank,
            rng: stream(seed, Stream::Memory),
            feature_dim,
        });
        out.write(Box::into_raw(handle));
        Ok(())
    })
}

/// # Safety
/// `bank` must come from `bmb_bank_new` and not be used afterwards. NULL is
/// ignored.
#[no_mangle]
pub unsafe extern "C" fn bmb_bank_free(bank: *mut BmbMemoryBank) {
    if !bank.is_null() {
        drop(Box::from_raw(bank));
    }
}

unsafe fn bank_mut<'a>(bank: *mut BmbMemoryBank) -> Result<&'a mut BmbMemoryBank, Fail> {
    bank.as_mut().ok_or_else(|| null("bank"))
}

/// Offers one record. `source_view` is 0 for weak, 1 for strong.
/// `accepted` (optional) receives whether the record was stored.
///
/// # Safety
/// `feature` must point to `feature_dim` doubles; pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn bmb_bank_enqueue(
    bank: *mut BmbMemoryBank,
    feature: *const f64,
    pseudo_label: usize,
    confidence: f64,
    step: u64,
    source_view: u32,
    accepted: *mut bool,
) -> BmbStatus {
    guard(|| {
        let b = bank_mut(bank)?;
        let feature = slice_in(feature, b.feature_dim, "feature")?.to_vec();
        let source_view = match source_view {
            0 => SourceView::Weak,
            1 => SourceView::Strong,
            v => {
                return Err(Fail(
                    BmbStatus::InvalidArgument,
                    format!("unknown source view {v}"),
                ))
            }
        };
        if pseudo_label >= b.bank.num_classes() {
            return Err(Fail(
                BmbStatus::InvalidArgument,
                format!("pseudo label {pseudo_label} out of range"),
            ));
        }
        let rec = FeatureRecord {
            feature,
            pseudo_label,
            confidence,
            step,
            source_view,
        };
        let ok = b.bank.enqueue(rec, &mut b.rng)?;
        if !accepted.is_null() {
            accepted.write(ok);
        }
        Ok(())
    })
}

/// Evicts one record; its label and step go to the optional outputs.
///
/// # Safety
/// Pointers must be valid or NULL.
#[no_mangle]
pub unsafe extern "C" fn bmb_bank_dequeue(
    bank: *mut BmbMemoryBank,
    out_label: *mut usize,
    out_step: *mut u64,
) -> BmbStatus {
    guard(|| {
        let b = bank_mut(bank)?;
        let rec = b.bank.dequeue(&mut b.rng)?;
        if !out_label.is_null() {
            out_label.write(rec.pseudo_label);
        }
        if !out_step.is_null() {
            out_step.write(rec.step);
        }
        Ok(())
    })
}

/// Draws `n` records by reversed sampling. Labels go to `out_labels` (length
/// `n`), features to `out_features` (length `n * feature_dim`, may be NULL).
/// `out_drawn` receives the number drawn: `n`, or 0 for an empty bank.
///
/// # Safety
/// Buffers must have the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn bmb_bank_get(
    bank: *mut BmbMemoryBank,
    estimated_counts: *const usize,
    num_classes: usize,
    n: usize,
    lambda: f64,
    out_labels: *mut usize,
    out_features: *mut f64,
    out_drawn: *mut usize,
) -> BmbStatus {
    guard(|| {
        let b = bank_mut(bank)?;
        let est = slice_in(estimated_counts, num_classes, "estimated_counts")?;
        let labels = slice_out(out_labels, n, "out_labels")?;
        let dim = b.feature_dim;
        let BmbMemoryBank { bank, rng, .. } = b;
        let drawn = bank.get(est, n, lambda, rng)?;
        for (slot, r) in labels.iter_mut().zip(&drawn) {
            *slot = r.pseudo_label;
        }
        if !out_features.is_null() {
            let feats = slice_out(out_features, n * dim, "out_features")?;
            for (chunk, r) in feats.chunks_mut(dim.max(1)).zip(&drawn) {
                if r.feature.len() != chunk.len() {
                    return Err(Fail(
                        BmbStatus::InvalidArgument,
                        "stored feature width differs".into(),
                    ));
                }
                chunk.copy_from_slice(&r.feature);
            }
        }
        write_out(out_drawn, drawn.len(), "out_drawn")
    })
}

/// Copies per-class record counts into `out` (length `num_classes`).
///
/// # Safety
/// `out` must hold `num_classes` entries.
#[no_mangle]
pub unsafe extern "C" fn bmb_bank_counts(
    bank: *const BmbMemoryBank,
    out: *mut usize,
    num_classes: usize,
) -> BmbStatus {
    guard(|| {
        let b = bank.as_ref().ok_or_else(|| null("bank"))?;
        copy_counts(&b.bank.counts(), slice_out(out, num_classes, "out")?)
    })
}

/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn bmb_bank_len(bank: *const BmbMemoryBank, out: *mut usize) -> BmbStatus {
    guard(|| {
        let b = bank.as_ref().ok_or_else(|| null("bank"))?;
        write_out(out, b.bank.len(), "out")
    })
}

/// Normalized entropy of class occupancy; `Empty` status for an empty bank.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn bmb_bank_entropy(bank: *const BmbMemoryBank, out: *mut f64) -> BmbStatus {
    guard(|| {
        let b = bank.as_ref().ok_or_else(|| null("bank"))?;
        write_out(out, b.bank.balance_entropy()?, "out")
    })
}

pub struct BmbLedger {
    ledger: PseudoLabelLedger,
}

/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn bmb_ledger_new(num_classes: usize, out: *mut *mut BmbLedger) -> BmbStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if num_classes == 0 {
            return Err(Fail(
                BmbStatus::InvalidArgument,
                "num_classes must be positive".into(),
            ));
        }
        out.write(Box::into_raw(Box::new(BmbLedger {
            ledger: PseudoLabelLedger::new(num_classes),
        })));
        Ok(())
    })
}

/// # Safety
/// `ledger` must come from `bmb_ledger_new` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn bmb_ledger_free(ledger: *mut BmbLedger) {
    if !ledger.is_null() {
        drop(Box::from_raw(ledger));
    }
}

/// # Safety
/// `ledger` must be valid.
#[no_mangle]
pub unsafe extern "C" fn bmb_ledger_record(
    ledger: *mut BmbLedger,
    sample_id: u64,
    label: usize,
) -> BmbStatus {
    guard(|| {
        let l = ledger.as_mut().ok_or_else(|| null("ledger"))?;
        Ok(l.ledger.record(sample_id, label)?)
    })
}

/// Raw counts when `clamp_min` is 0, otherwise each count raised to at least
/// `clamp_min`.
///
/// # Safety
/// `out` must hold `num_classes` entries.
#[no_mangle]
pub unsafe extern "C" fn bmb_ledger_counts(
    ledger: *const BmbLedger,
    clamp_min: usize,
    out: *mut usize,
    num_classes: usize,
) -> BmbStatus {
    guard(|| {
        let l = ledger.as_ref().ok_or_else(|| null("ledger"))?;
        copy_counts(
            &l.ledger.estimated_counts(clamp_min),
            slice_out(out, num_classes, "out")?,
        )
    })
}

/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn bmb_ledger_min_count(
    ledger: *const BmbLedger,
    out: *mut usize,
) -> BmbStatus {
    guard(|| {
        let l = ledger.as_ref().ok_or_else(|| null("ledger"))?;
        write_out(out, l.ledger.min_count(), "out")
    })
}

/// Long-tailed class sizes into `out` (length `num_classes`).
///
/// # Safety
/// `out` must hold `num_classes` entries.
#[no_mangle]
pub unsafe extern "C" fn bmb_longtail_counts(
    n1: usize,
    gamma: f64,
    num_classes: usize,
    out: *mut usize,
) -> BmbStatus {
    guard(|| {
        if !(gamma >= 1.0 && gamma.is_finite()) {
            return Err(Fail(
                BmbStatus::InvalidArgument,
                format!("gamma must be finite and >= 1, got {gamma}"),
            ));
        }
        copy_counts(
            &data::longtail_counts(n1, gamma, num_classes),
            slice_out(out, num_classes, "out")?,
        )
    })
}

/// # Safety
/// `counts` must hold `num_classes` entries; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn bmb_labeled_weight(
    counts: *const usize,
    num_classes: usize,
    class_idx: usize,
    alpha: f64,
    out: *mut f64,
) -> BmbStatus {
    guard(|| {
        let c = slice_in(counts, num_classes, "counts")?;
        write_out(out, weighting::labeled_weight(c, class_idx, alpha)?, "out")
    })
}

/// # Safety
/// `estimated_counts` must hold `num_classes` entries; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn bmb_unlabeled_weight(
    estimated_counts: *const usize,
    num_classes: usize,
    pseudo_label: usize,
    alpha: f64,
    out: *mut f64,
) -> BmbStatus {
    guard(|| {
        let c = slice_in(estimated_counts, num_classes, "estimated_counts")?;
        write_out(
            out,
            weighting::unlabeled_weight(c, pseudo_label, alpha)?,
            "out",
        )
    })
}

/// Validates a JSON run config and trains every seed into `out_dir`.
///
/// # Safety
/// Both arguments must be NUL-terminated UTF-8 strings.
#[no_mangle]
pub unsafe extern "C" fn bmb_train_run(
    config_json: *const c_char,
    out_dir: *const c_char,
) -> BmbStatus {
    guard(|| {
        let text = str_in(config_json, "config_json")?;
        let out = str_in(out_dir, "out_dir")?;
        let value = serde_json_value(text)?;
        let cfg = config::from_value(value)?;
        bmb::cli::train_all(&cfg, Path::new(out))?;
        Ok(())
    })
}

fn serde_json_value(text: &str) -> Result<config::JsonValue, Fail> {
    text.parse()
        .map_err(|e| Fail(BmbStatus::ConfigError, format!("config is not JSON: {e}")))
}
