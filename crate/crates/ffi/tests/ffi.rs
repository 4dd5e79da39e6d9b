use std::ffi::{CStr, CString};
use std::ptr;
use std::sync::Arc;

use gdfo::blackbox::{serve, BlackBox, TeacherService};
use gdfo::cmaes::CmaState;
use gdfo::models::{EncoderKind, ModelConfig, ModelParams};
use gdfo::promptspace::{combine, ProjectionMatrix, PromptRole, PromptVector};
use gdfo_ffi::*;

fn teacher() -> ModelParams {
    let cfg = ModelConfig {
        vocab_size: 20,
        embed_dim: 4,
        n_prompt_tokens: 2,
        hidden_dim: 6,
        encoder: EncoderKind::PoolMlp,
        label_word_ids: vec![1, 2, 3],
    };
    ModelParams::init(cfg, 11).unwrap()
}

fn last_error() -> String {
    let p = gdfo_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

unsafe fn query(h: *const GdfoBlackBox, prompt: &[f64], tokens: &[u32]) -> (GdfoStatus, Vec<f64>) {
    let mut buf = [0.0; 8];
    let mut n = 0usize;
    let s = gdfo_blackbox_query(h, prompt.as_ptr(), prompt.len(), tokens.as_ptr(), tokens.len(), buf.as_mut_ptr(), buf.len(), &mut n);
    (s, buf[..n.min(8)].to_vec())
}

#[test]
fn checkpoint_handle_matches_the_library_and_meters() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("teacher.ckpt");
    let t = teacher();
    t.to_checkpoint().save(&path).unwrap();
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let reference = BlackBox::local(Arc::new(TeacherService::new(t, 10)));

    let mut h = ptr::null_mut();
    unsafe {
        assert_eq!(gdfo_blackbox_open_checkpoint(cpath.as_ptr(), 2, &mut h), GdfoStatus::Ok);
        let prompt = [0.3, -0.1, 0.7, 0.0, 1.0, -2.0, 0.5, 0.25];
        let (s, logits) = query(h, &prompt, &[4, 5, 6]);
        assert_eq!(s, GdfoStatus::Ok);
        assert_eq!(logits, reference.query_one(&prompt, &[4, 5, 6]).unwrap());
        assert_eq!(query(h, &prompt, &[7]).0, GdfoStatus::Ok);
        assert_eq!(query(h, &prompt, &[7]).0, GdfoStatus::Budget);
        assert!(last_error().contains("budget"));
        let mut used = 0;
        assert_eq!(gdfo_blackbox_calls_used(h, &mut used), GdfoStatus::Ok);
        assert_eq!(used, 2);
        gdfo_blackbox_free(h);
    }
}

#[test]
fn socket_handle_returns_the_same_logits() {
    let svc = Arc::new(TeacherService::new(teacher(), 5));
    let server = serve(svc.clone(), "127.0.0.1:0").unwrap();
    let endpoint = CString::new(server.local_addr().to_string()).unwrap();
    let local = BlackBox::local(svc);
    let mut h = ptr::null_mut();
    unsafe {
        assert_eq!(gdfo_blackbox_connect(endpoint.as_ptr(), &mut h), GdfoStatus::Ok);
        let prompt = [0.1; 8];
        let (s, remote) = query(h, &prompt, &[9, 3]);
        assert_eq!(s, GdfoStatus::Ok);
        let direct = local.query_one(&prompt, &[9, 3]).unwrap();
        assert_eq!(remote.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), direct.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        let mut used = 0;
        gdfo_blackbox_calls_used(h, &mut used);
        assert_eq!(used, 2);
        gdfo_blackbox_free(h);
    }
    server.shutdown();
}

#[test]
fn argument_errors_have_codes() {
    let mut h = ptr::null_mut();
    unsafe {
        assert_eq!(gdfo_blackbox_open_checkpoint(ptr::null(), 1, &mut h), GdfoStatus::NullPointer);
        assert!(last_error().contains("path"));
        let missing = CString::new("/nonexistent/teacher.ckpt").unwrap();
        assert_eq!(gdfo_blackbox_open_checkpoint(missing.as_ptr(), 1, &mut h), GdfoStatus::Io);
        assert!(h.is_null());
        let bad = CString::new("not an address").unwrap();
        assert_ne!(gdfo_blackbox_connect(bad.as_ptr(), &mut h), GdfoStatus::Ok);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        teacher().to_checkpoint().save(&path).unwrap();
        let cpath = CString::new(path.to_str().unwrap()).unwrap();
        assert_eq!(gdfo_blackbox_open_checkpoint(cpath.as_ptr(), 4, &mut h), GdfoStatus::Ok);
        let mut small = [0.0; 2];
        let mut n = 0;
        let prompt = [0.0; 8];
        let s = gdfo_blackbox_query(h, prompt.as_ptr(), 8, [1u32].as_ptr(), 1, small.as_mut_ptr(), 2, &mut n);
        assert_eq!((s, n), (GdfoStatus::BufferTooSmall, 3));
        assert_eq!(query(h, &[0.0; 3], &[1]).0, GdfoStatus::Protocol);
        gdfo_blackbox_free(h);
        gdfo_blackbox_free(ptr::null_mut());
    }
}

#[test]
fn cma_handle_follows_the_library() {
    let (dim, pop) = (3, 6);
    let mut h = ptr::null_mut();
    let mut reference = CmaState::new(dim, 0.5, pop, 4).unwrap();
    unsafe {
        assert_eq!(gdfo_cma_new(dim, 0.5, pop, 4, &mut h), GdfoStatus::Ok);
        let mut xs = vec![0.0; dim * pop];
        for _ in 0..20 {
            assert_eq!(gdfo_cma_ask(h, xs.as_mut_ptr(), xs.len()), GdfoStatus::Ok);
            let expected = reference.ask().unwrap();
            assert_eq!(xs, expected.concat());
            let f: Vec<f64> = xs.chunks(dim).map(|x| x.iter().map(|v| (v - 1.0).powi(2)).sum()).collect();
            assert_eq!(gdfo_cma_tell(h, f.as_ptr(), f.len()), GdfoStatus::Ok);
            reference.tell(&expected, &f).unwrap();
        }
        let mut mean = [0.0; 3];
        assert_eq!(gdfo_cma_mean(h, mean.as_mut_ptr(), 3), GdfoStatus::Ok);
        assert_eq!(mean.as_slice(), reference.mean());
        assert_eq!(gdfo_cma_ask(h, xs.as_mut_ptr(), 5), GdfoStatus::BufferTooSmall);
        assert_eq!(gdfo_cma_tell(h, [1.0].as_ptr(), 1), GdfoStatus::Protocol);
        assert_eq!(gdfo_cma_ask(h, xs.as_mut_ptr(), xs.len()), GdfoStatus::Ok);
        assert_eq!(gdfo_cma_tell(h, [1.0].as_ptr(), 1), GdfoStatus::Contract);
        gdfo_cma_free(h);
        assert_eq!(gdfo_cma_new(0, 0.5, pop, 4, &mut h), GdfoStatus::InvalidArgument);
    }
}

#[test]
fn combine_matches_and_keeps_endpoints() {
    let g = [0.1, -0.2, 0.3, 0.4, 0.5];
    let p0 = [1.0, 2.0, -1.0, 0.0, 0.5];
    let z = [0.3, -0.7];
    let a = ProjectionMatrix::new(5, 2, None, 9).unwrap();
    let gv = PromptVector::new(g.to_vec(), PromptRole::Generated).unwrap();
    let p0v = PromptVector::new(p0.to_vec(), PromptRole::Initial).unwrap();
    for alpha in [0.0, 0.3, 1.0] {
        let mut out = [0.0; 5];
        let s = unsafe { gdfo_combine(g.as_ptr(), p0.as_ptr(), 5, z.as_ptr(), 2, 9, 0.0, alpha, out.as_mut_ptr()) };
        assert_eq!(s, GdfoStatus::Ok);
        assert_eq!(out.as_slice(), combine(&gv, &p0v, &a, &z, alpha).unwrap().values());
    }
    let mut out = [0.0; 5];
    let s = unsafe { gdfo_combine(g.as_ptr(), p0.as_ptr(), 5, z.as_ptr(), 2, 9, 0.0, 1.5, out.as_mut_ptr()) };
    assert_eq!(s, GdfoStatus::InvalidArgument);
    assert!(last_error().contains("alpha"));
}

#[test]
fn errors_are_thread_local() {
    let mut h = ptr::null_mut();
    unsafe { gdfo_cma_new(0, 1.0, 4, 0, &mut h) };
    let here = last_error();
    std::thread::spawn(|| assert!(gdfo_last_error().is_null())).join().unwrap();
    assert_eq!(last_error(), here);
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(gdfo_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/gdfo.h")).unwrap();
    let src = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/src/lib.rs")).unwrap();
    let exports: Vec<&str> = src
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .filter_map(|rest| rest.split('(').next())
        .collect();
    assert!(exports.len() >= 12);
    for name in exports {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
    assert!(header.contains("typedef struct GdfoBlackBox GdfoBlackBox;"));
    assert!(header.contains("GDFO_STATUS_BUDGET = 5"));
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/gdfo.h");
    for (compiler, lang) in [("cc", "c"), ("c++", "c++")] {
        let out = std::process::Command::new(compiler)
            .args(["-fsyntax-only", "-Wall", "-Werror", "-x", lang, header])
            .output()
            .expect("C toolchain available");
        assert!(out.status.success(), "{compiler}: {}", String::from_utf8_lossy(&out.stderr));
    }
}
