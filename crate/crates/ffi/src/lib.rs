//! C ABI over the core laboratory: reduced-precision quantization, learning
//! rate schedules, the tokenizer, and the configuration planner. Handles are
//! opaque; every fallible call returns a `BflabStatus` and writes results
//! through out-pointers. The header is generated into `include/bflab.h`.

use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::path::Path;
use std::ptr;

use bflab_core::error::Error;
use bflab_core::numerics::{
    exact_vanish_threshold, heuristic_vanish_threshold, quantize, FloatFormat, RoundingMode,
    BF16, FP32, WIDE,
};
use bflab_core::planner::{
    best_config, enumerate_space, AccumSync, HardwareSpec, ModelShape, Precision, Sharding,
};
use bflab_core::schedule::{lr_at, ScheduleSpec};
use bflab_core::tokenizer::{fertility, TokenizerModel};

/// Result code for every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BflabStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidUtf8 = 3,
    NumericalAbort = 4,
    IoError = 5,
    NoResult = 6,
}

fn status_of(e: &Error) -> BflabStatus {
    match e {
        Error::NumericalAbort(_) => BflabStatus::NumericalAbort,
        Error::Io(_) => BflabStatus::IoError,
        _ => BflabStatus::InvalidArgument,
    }
}

/// Emulated floating-point format selector.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BflabFormat {
    Bf16 = 0,
    Fp32 = 1,
    Wide = 2,
}

impl BflabFormat {
    fn format(self) -> FloatFormat {
        match self {
            BflabFormat::Bf16 => BF16,
            BflabFormat::Fp32 => FP32,
            BflabFormat::Wide => WIDE,
        }
    }
}

/// Rounding mode selector; `seed` is only read for `Stochastic`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BflabRounding {
    NearestEven = 0,
    Stochastic = 1,
}

/// Quantizes `value` into the chosen format and writes it to `out`.
///
/// # Safety
/// `out` must point to a writable `double`.
#[no_mangle]
pub unsafe extern "C" fn bflab_quantize(
    value: f64,
    format: BflabFormat,
    rounding: BflabRounding,
    seed: u64,
    out: *mut f64,
) -> BflabStatus {
    if out.is_null() {
        return BflabStatus::NullPointer;
    }
    let mode = match rounding {
        BflabRounding::NearestEven => RoundingMode::NearestEven,
        BflabRounding::Stochastic => RoundingMode::Stochastic { seed },
    };
    *out = quantize(value, format.format(), mode);
    BflabStatus::Ok
}

/// Heuristic vanishing-update threshold `|w| / 2^mantissa_bits`.
///
/// # Safety
/// `out` must point to a writable `double`.
#[no_mangle]
pub unsafe extern "C" fn bflab_heuristic_vanish_threshold(
    weight: f64,
    format: BflabFormat,
    out: *mut f64,
) -> BflabStatus {
    if out.is_null() {
        return BflabStatus::NullPointer;
    }
    if !(weight > 0.0) || !weight.is_finite() {
        return BflabStatus::InvalidArgument;
    }
    *out = heuristic_vanish_threshold(weight, format.format());
    BflabStatus::Ok
}

/// Exact vanishing-update threshold (half an ulp of the stored weight).
///
/// # Safety
/// `out` must point to a writable `double`.
#[no_mangle]
pub unsafe extern "C" fn bflab_exact_vanish_threshold(
    weight: f64,
    format: BflabFormat,
    out: *mut f64,
) -> BflabStatus {
    if out.is_null() {
        return BflabStatus::NullPointer;
    }
    match exact_vanish_threshold(weight, format.format()) {
        Ok(v) => {
            *out = v;
            BflabStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}

/// Opaque learning-rate schedule handle.
pub struct BflabSchedule {
    spec: ScheduleSpec,
}

/// Warmup + cosine decay to a floor. Returns NULL on invalid arguments.
#[no_mangle]
pub extern "C" fn bflab_schedule_cosine_floor(
    total_steps: u64,
    warmup_steps: u64,
    lr_peak: f64,
    end_lr: f64,
) -> *mut BflabSchedule {
    if total_steps == 0 || warmup_steps > total_steps || lr_peak <= 0.0 || end_lr < 0.0 {
        return ptr::null_mut();
    }
    Box::into_raw(Box::new(BflabSchedule {
        spec: ScheduleSpec::cosine_floor(total_steps, warmup_steps, lr_peak, end_lr),
    }))
}

/// Warmup / cosine / constant / anneal schedule with pinned fractions.
#[no_mangle]
pub extern "C" fn bflab_schedule_infinite(total_steps: u64) -> *mut BflabSchedule {
    if total_steps == 0 {
        return ptr::null_mut();
    }
    Box::into_raw(Box::new(BflabSchedule {
        spec: ScheduleSpec::infinite(total_steps),
    }))
}

/// Learning rate at `step` (1-based; step 0 reports 0).
///
/// # Safety
/// `schedule` must be a live handle from a `bflab_schedule_*` constructor;
/// `out` must point to a writable `double`.
#[no_mangle]
pub unsafe extern "C" fn bflab_schedule_lr_at(
    schedule: *const BflabSchedule,
    step: u64,
    out: *mut f64,
) -> BflabStatus {
    if schedule.is_null() || out.is_null() {
        return BflabStatus::NullPointer;
    }
    match lr_at(&(*schedule).spec, step) {
        Ok(v) => {
            *out = v;
            BflabStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}

/// # Safety
/// `schedule` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bflab_schedule_free(schedule: *mut BflabSchedule) {
    if !schedule.is_null() {
        drop(Box::from_raw(schedule));
    }
}

/// Opaque tokenizer handle.
pub struct BflabTokenizer {
    model: TokenizerModel,
}

/// Loads a saved tokenizer from a JSON file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must point to a writable
/// handle slot.
#[no_mangle]
pub unsafe extern "C" fn bflab_tokenizer_load(
    path: *const c_char,
    out: *mut *mut BflabTokenizer,
) -> BflabStatus {
    if path.is_null() || out.is_null() {
        return BflabStatus::NullPointer;
    }
    let path = match CStr::from_ptr(path).to_str() {
        Ok(s) => s,
        Err(_) => return BflabStatus::InvalidUtf8,
    };
    match TokenizerModel::load(Path::new(path)) {
        Ok(model) => {
            *out = Box::into_raw(Box::new(BflabTokenizer { model }));
            BflabStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}

/// Total vocabulary size including specials and byte tokens; 0 for NULL.
///
/// # Safety
/// `tokenizer` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bflab_tokenizer_vocab_size(tokenizer: *const BflabTokenizer) -> usize {
    if tokenizer.is_null() {
        0
    } else {
        (*tokenizer).model.vocab_size()
    }
}

/// Encodes UTF-8 text into `out_ids`. Writes the needed length to `out_len`;
/// when `out_ids` is NULL only the length is reported, and when `capacity`
/// is too small the call fails after reporting the length.
///
/// # Safety
/// `text` must be NUL-terminated; `out_ids` must have room for `capacity`
/// ids when non-NULL; `out_len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bflab_tokenizer_encode(
    tokenizer: *const BflabTokenizer,
    text: *const c_char,
    out_ids: *mut u32,
    capacity: usize,
    out_len: *mut usize,
) -> BflabStatus {
    if tokenizer.is_null() || text.is_null() || out_len.is_null() {
        return BflabStatus::NullPointer;
    }
    let text = match CStr::from_ptr(text).to_str() {
        Ok(s) => s,
        Err(_) => return BflabStatus::InvalidUtf8,
    };
    let ids = match (*tokenizer).model.encode(text) {
        Ok(ids) => ids,
        Err(e) => return status_of(&e),
    };
    *out_len = ids.len();
    if out_ids.is_null() {
        return BflabStatus::Ok;
    }
    if capacity < ids.len() {
        return BflabStatus::InvalidArgument;
    }
    ptr::copy_nonoverlapping(ids.as_ptr(), out_ids, ids.len());
    BflabStatus::Ok
}

/// Decodes ids back to text; the result must be freed with
/// `bflab_string_free`.
///
/// # Safety
/// `ids` must point to `len` readable ids; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bflab_tokenizer_decode(
    tokenizer: *const BflabTokenizer,
    ids: *const u32,
    len: usize,
    out: *mut *mut c_char,
) -> BflabStatus {
    if tokenizer.is_null() || (ids.is_null() && len > 0) || out.is_null() {
        return BflabStatus::NullPointer;
    }
    let ids = std::slice::from_raw_parts(ids, len);
    match (*tokenizer).model.decode(ids) {
        Ok(text) => match CString::new(text) {
            Ok(s) => {
                *out = s.into_raw();
                BflabStatus::Ok
            }
            Err(_) => BflabStatus::InvalidArgument,
        },
        Err(e) => status_of(&e),
    }
}

/// Tokens per whitespace word of `text`.
///
/// # Safety
/// `text` must be NUL-terminated; `out` must point to a writable `double`.
#[no_mangle]
pub unsafe extern "C" fn bflab_tokenizer_fertility(
    tokenizer: *const BflabTokenizer,
    text: *const c_char,
    out: *mut f64,
) -> BflabStatus {
    if tokenizer.is_null() || text.is_null() || out.is_null() {
        return BflabStatus::NullPointer;
    }
    let text = match CStr::from_ptr(text).to_str() {
        Ok(s) => s,
        Err(_) => return BflabStatus::InvalidUtf8,
    };
    match fertility(&(*tokenizer).model, text) {
        Ok(v) => {
            *out = v;
            BflabStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}

/// # Safety
/// `tokenizer` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bflab_tokenizer_free(tokenizer: *mut BflabTokenizer) {
    if !tokenizer.is_null() {
        drop(Box::from_raw(tokenizer));
    }
}

/// # Safety
/// `s` must be NULL or a string returned by `bflab_tokenizer_decode`.
#[no_mangle]
pub unsafe extern "C" fn bflab_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Best feasible training configuration for one precision and GPU budget.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BflabPlan {
    pub micro_batch: u32,
    pub act_ckpt: bool,
    pub shard_full: bool,
    pub sync_grads: bool,
    pub paged_optimizer: bool,
    pub relative_time: f64,
    pub total_bytes: f64,
}

/// Ranks the full configuration space for a 7B-scale model and returns the
/// fastest feasible point; `NoResult` when everything is out of memory.
///
/// # Safety
/// `out` must point to a writable `BflabPlan`.
#[no_mangle]
pub unsafe extern "C" fn bflab_plan_best(
    mixed_precision: bool,
    gpu_count: usize,
    per_gpu_memory: f64,
    param_count: f64,
    out: *mut BflabPlan,
) -> BflabStatus {
    if out.is_null() {
        return BflabStatus::NullPointer;
    }
    let hw = HardwareSpec {
        gpu_count,
        per_gpu_memory,
        interconnect_penalty: 0.05,
    };
    let shape = ModelShape {
        param_count,
        ..ModelShape::benchmark_7b()
    };
    let precision = if mixed_precision {
        Precision::Mixed
    } else {
        Precision::Pure
    };
    let ranked = match best_config(&enumerate_space(precision, shape), &hw) {
        Ok(r) => r,
        Err(e) => return status_of(&e),
    };
    match ranked.first() {
        None => BflabStatus::NoResult,
        Some(best) => {
            *out = BflabPlan {
                micro_batch: best.config.micro_batch,
                act_ckpt: best.config.act_ckpt,
                shard_full: best.config.sharding == Sharding::Full,
                sync_grads: best.config.accum_sync == AccumSync::Sync,
                paged_optimizer: best.config.paged_optimizer,
                relative_time: best.relative_time,
                total_bytes: best.memory.total,
            };
            BflabStatus::Ok
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_matches_core() {
        let mut out = 0.0;
        let status = unsafe {
            bflab_quantize(1.0 + 1e-3, BflabFormat::Bf16, BflabRounding::NearestEven, 0, &mut out)
        };
        assert_eq!(status, BflabStatus::Ok);
        assert_eq!(out, quantize(1.0 + 1e-3, BF16, RoundingMode::NearestEven));
        assert_eq!(
            unsafe { bflab_quantize(1.0, BflabFormat::Bf16, BflabRounding::NearestEven, 0, ptr::null_mut()) },
            BflabStatus::NullPointer
        );
    }

    #[test]
    fn vanish_thresholds_flow_through() {
        let mut h = 0.0;
        let mut e = 0.0;
        unsafe {
            assert_eq!(
                bflab_heuristic_vanish_threshold(0.05, BflabFormat::Bf16, &mut h),
                BflabStatus::Ok
            );
            assert_eq!(h, 3.90625e-4);
            // The exact threshold needs a representable stored weight.
            let w = 0.050048828125;
            assert_eq!(
                bflab_exact_vanish_threshold(w, BflabFormat::Bf16, &mut e),
                BflabStatus::Ok
            );
            assert_eq!(
                bflab_heuristic_vanish_threshold(w, BflabFormat::Bf16, &mut h),
                BflabStatus::Ok
            );
            assert_ne!(
                bflab_exact_vanish_threshold(0.05, BflabFormat::Bf16, &mut e),
                BflabStatus::NullPointer
            );
        }
        assert!(h / e >= 2.0 && h / e < 4.0);
    }

    #[test]
    fn schedule_handle_round_trip() {
        let s = bflab_schedule_cosine_floor(7680, 76, 4e-5, 2e-6);
        assert!(!s.is_null());
        let mut lr = 0.0;
        unsafe {
            assert_eq!(bflab_schedule_lr_at(s, 76, &mut lr), BflabStatus::Ok);
            assert_eq!(lr, 4e-5);
            assert_eq!(bflab_schedule_lr_at(s, 7680, &mut lr), BflabStatus::Ok);
            assert_eq!(lr, 2e-6);
            assert_ne!(bflab_schedule_lr_at(s, 7681, &mut lr), BflabStatus::Ok);
            bflab_schedule_free(s);
        }
        assert!(bflab_schedule_cosine_floor(0, 0, 4e-5, 2e-6).is_null());
    }

    #[test]
    fn tokenizer_handle_encodes_and_decodes() {
        use bflab_core::tokenizer::{train_bpe, TrainerConfig};
        let corpus = vec!["the cat sat on the mat".to_string(); 4];
        let cfg = TrainerConfig {
            vocab_size: 300,
            ..TrainerConfig::default()
        };
        let model = train_bpe(&corpus, &cfg).unwrap();
        let dir = std::env::temp_dir().join("bflab-ffi-tok.json");
        model.save(&dir).unwrap();
        let path = CString::new(dir.to_str().unwrap()).unwrap();

        let mut tok: *mut BflabTokenizer = ptr::null_mut();
        unsafe {
            assert_eq!(bflab_tokenizer_load(path.as_ptr(), &mut tok), BflabStatus::Ok);
            assert_eq!(bflab_tokenizer_vocab_size(tok), model.vocab_size());

            let text = CString::new("the cat sat").unwrap();
            let mut len = 0usize;
            assert_eq!(
                bflab_tokenizer_encode(tok, text.as_ptr(), ptr::null_mut(), 0, &mut len),
                BflabStatus::Ok
            );
            assert!(len > 0);
            let mut ids = vec![0u32; len];
            assert_eq!(
                bflab_tokenizer_encode(tok, text.as_ptr(), ids.as_mut_ptr(), len, &mut len),
                BflabStatus::Ok
            );

            let mut decoded: *mut c_char = ptr::null_mut();
            assert_eq!(
                bflab_tokenizer_decode(tok, ids.as_ptr(), len, &mut decoded),
                BflabStatus::Ok
            );
            assert_eq!(CStr::from_ptr(decoded).to_str().unwrap(), "the cat sat");
            bflab_string_free(decoded);

            let mut fert = 0.0;
            assert_eq!(
                bflab_tokenizer_fertility(tok, text.as_ptr(), &mut fert),
                BflabStatus::Ok
            );
            assert!(fert >= 1.0);
            bflab_tokenizer_free(tok);
        }
    }

    #[test]
    fn planner_reports_the_two_gpu_verdicts() {
        let mut plan = BflabPlan {
            micro_batch: 0,
            act_ckpt: false,
            shard_full: false,
            sync_grads: false,
            paged_optimizer: false,
            relative_time: 0.0,
            total_bytes: 0.0,
        };
        unsafe {
            assert_eq!(
                bflab_plan_best(true, 1, 80e9, 7e9, &mut plan),
                BflabStatus::NoResult
            );
            assert_eq!(bflab_plan_best(false, 2, 80e9, 7e9, &mut plan), BflabStatus::Ok);
        }
        assert_eq!(plan.micro_batch, 1);
        assert!(!plan.act_ckpt && !plan.shard_full && !plan.sync_grads && !plan.paged_optimizer);
    }
}
