use std::ffi::{CStr, CString};
use std::ptr;

use iou_uniform::rng::seeded;
use iou_uniform::toyhead::{HeadKind, HeadModel};
use iou_uniform_ffi::*;

fn bx(cx: f64, cy: f64, w: f64, h: f64) -> IuBox {
    IuBox { cx, cy, w, h }
}

fn last_error() -> String {
    let p = iu_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn iou_and_deltas() {
    let (a, b) = (bx(0.0, 0.0, 10.0, 10.0), bx(5.0, 0.0, 10.0, 10.0));
    let mut v = 0.0;
    assert_eq!(unsafe { iu_iou(&a, &b, &mut v) }, IuStatus::Ok);
    assert!((v - 1.0 / 3.0).abs() < 1e-15);

    let mut d = IuDeltas {
        dx: 0.0,
        dy: 0.0,
        dw: 0.0,
        dh: 0.0,
    };
    let g = bx(3.0, -2.0, 20.0, 5.0);
    assert_eq!(unsafe { iu_encode_deltas(&a, &g, &mut d) }, IuStatus::Ok);
    let mut back = bx(0.0, 0.0, 1.0, 1.0);
    assert_eq!(unsafe { iu_apply_deltas(&a, &d, &mut back) }, IuStatus::Ok);
    for (x, y) in [(back.cx, g.cx), (back.cy, g.cy), (back.w, g.w), (back.h, g.h)] {
        assert!((x - y).abs() < 1e-9);
    }
}

#[test]
fn errors_set_status_and_message() {
    let bad = bx(0.0, 0.0, -1.0, 1.0);
    let good = bx(0.0, 0.0, 1.0, 1.0);
    let mut v = 0.0;
    assert_eq!(unsafe { iu_iou(&bad, &good, &mut v) }, IuStatus::InvalidArgument);
    assert!(last_error().contains("invalid box"));
    assert_eq!(unsafe { iu_iou(ptr::null(), &good, &mut v) }, IuStatus::NullPointer);
    assert_eq!(
        unsafe { iu_smooth_l1(1.0, 0.0, &mut v, ptr::null_mut()) },
        IuStatus::InvalidArgument
    );
}

#[test]
fn smooth_l1_and_weighted_loss() {
    let (mut v, mut g) = (0.0, 0.0);
    assert_eq!(unsafe { iu_smooth_l1(2.0, 1.0, &mut v, &mut g) }, IuStatus::Ok);
    assert_eq!((v, g), (1.5, 1.0));

    let p = [IuDeltas {
        dx: 2.0,
        dy: -2.0,
        dw: 2.0,
        dh: -2.0,
    }; 4];
    let t = [IuDeltas {
        dx: 0.0,
        dy: 0.0,
        dw: 0.0,
        dh: 0.0,
    }; 4];
    let iv = [0usize, 1, 2, 3];
    let w = [1.0, 1.5, 3.0, 3.0];
    let mut total = 0.0;
    let mut per = [0.0; 4];
    let s = unsafe {
        iu_weighted_reg_loss(
            p.as_ptr(),
            t.as_ptr(),
            iv.as_ptr(),
            4,
            w.as_ptr(),
            4,
            1.0,
            &mut total,
            per.as_mut_ptr(),
        )
    };
    assert_eq!(s, IuStatus::Ok);
    assert_eq!(total, 51.0);
    assert_eq!(per, [6.0, 9.0, 18.0, 18.0]);

    let bad_iv = [0usize, 1, 2, 7];
    let s = unsafe {
        iu_weighted_reg_loss(
            p.as_ptr(),
            t.as_ptr(),
            bad_iv.as_ptr(),
            4,
            w.as_ptr(),
            4,
            1.0,
            &mut total,
            ptr::null_mut(),
        )
    };
    assert_eq!(s, IuStatus::InvalidArgument);
}

#[test]
fn nms_rankings() {
    let b = bx(10.0, 10.0, 10.0, 10.0);
    let dets = [
        IuDetection {
            bbox: b,
            class_id: 0,
            cls_score: 0.9,
            iou_pred: 0.5,
        },
        IuDetection {
            bbox: bx(11.0, 10.0, 10.0, 10.0),
            class_id: 0,
            cls_score: 0.8,
            iou_pred: 0.9,
        },
        IuDetection {
            bbox: bx(100.0, 10.0, 10.0, 10.0),
            class_id: 0,
            cls_score: 0.1,
            iou_pred: 0.9,
        },
    ];
    let mut keep = [usize::MAX; 3];
    let mut n = 0;
    assert_eq!(
        unsafe { iu_nms(dets.as_ptr(), 3, 0.5, IuRanking::Cls, keep.as_mut_ptr(), &mut n) },
        IuStatus::Ok
    );
    assert_eq!(&keep[..n], &[0, 2]);
    assert_eq!(
        unsafe { iu_nms(dets.as_ptr(), 3, 0.5, IuRanking::Fused, keep.as_mut_ptr(), &mut n) },
        IuStatus::Ok
    );
    assert_eq!(&keep[..n], &[1, 2]);
    assert_eq!(
        unsafe { iu_nms(dets.as_ptr(), 3, 1.5, IuRanking::Fused, keep.as_mut_ptr(), &mut n) },
        IuStatus::InvalidArgument
    );
    assert_eq!(
        unsafe { iu_nms(ptr::null(), 0, 0.5, IuRanking::Cls, ptr::null_mut(), &mut n) },
        IuStatus::Ok
    );
    assert_eq!(n, 0);
}

#[test]
fn sample_set_handle() {
    let gts = [bx(100.0, 100.0, 50.0, 40.0)];
    let mut set = ptr::null_mut();
    assert_eq!(
        unsafe { iu_sample_set_generate(gts.as_ptr(), 1, 7, &mut set) },
        IuStatus::Ok
    );
    assert_eq!(unsafe { iu_sample_set_len(set) }, 256);
    assert_eq!(unsafe { iu_sample_set_shortfalls(set) }, 0);
    let mut counts = [0; 4];
    let mut s = IuSample {
        bbox: bx(0.0, 0.0, 1.0, 1.0),
        gt_index: 9,
        iou: 0.0,
        interval: 9,
    };
    for i in 0..256 {
        assert_eq!(unsafe { iu_sample_set_get(set, i, &mut s) }, IuStatus::Ok);
        counts[s.interval] += 1;
        assert_eq!(s.gt_index, 0);
        assert!(s.iou >= 0.5);
    }
    assert_eq!(counts, [64; 4]);
    assert_eq!(unsafe { iu_sample_set_get(set, 256, &mut s) }, IuStatus::OutOfRange);
    unsafe { iu_sample_set_free(set) };
    unsafe { iu_sample_set_free(ptr::null_mut()) };
}

#[test]
fn head_model_handle() {
    let m = HeadModel::init(HeadKind::IouPredictor, 12, 8, 0.5, &mut seeded(3));
    let json = CString::new(serde_json::to_string(&m.to_document()).unwrap()).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { iu_head_model_from_json(json.as_ptr(), &mut h) }, IuStatus::Ok);
    assert_eq!(unsafe { iu_head_model_input_dim(h) }, 12);
    assert_eq!(unsafe { iu_head_model_output_dim(h) }, 1);
    assert!(unsafe { iu_head_model_is_iou_predictor(h) });
    let x: Vec<f64> = (0..12).map(|i| i as f64 * 0.1 - 0.5).collect();
    let mut y = [0.0];
    assert_eq!(
        unsafe { iu_head_model_predict(h, x.as_ptr(), 12, y.as_mut_ptr(), 1) },
        IuStatus::Ok
    );
    assert_eq!(y[0], m.forward(&x)[0]);
    assert_eq!(
        unsafe { iu_head_model_predict(h, x.as_ptr(), 11, y.as_mut_ptr(), 1) },
        IuStatus::InvalidArgument
    );
    unsafe { iu_head_model_free(h) };

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.json");
    let p = CString::new(missing.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { iu_head_model_load(p.as_ptr(), &mut h) }, IuStatus::Io);
    assert!(h.is_null());
    assert!(last_error().contains("absent.json"));

    let bad = CString::new("{\"format_version\": 1}").unwrap();
    assert_eq!(
        unsafe { iu_head_model_from_json(bad.as_ptr(), &mut h) },
        IuStatus::Format
    );
}
