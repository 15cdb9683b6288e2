use std::ffi::c_char;
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use vqad::codec::{encode, size_report};
use vqad::field::{NeuralField, RenderSettings, TaskKind};
use vqad::grid::{GridConfig, Occupancy};
use vqad::train::{init_field, TrainConfig, TrainMode};
use vqad::vq::VqConfig;
use vqad_ffi::*;

fn model(task: TaskKind, mode: TrainMode) -> NeuralField {
    let cfg = TrainConfig {
        mode,
        hidden: 16,
        init_std: 0.5,
        logit_init_std: 1.0,
        ..TrainConfig::default()
    };
    let grid = GridConfig {
        levels: 3,
        base_resolution: 2,
        feature_dim: 4,
        dim: task.spatial_dim(),
    };
    let render = RenderSettings {
        background: [0.1, 0.2, 0.3],
        samples_per_cell: 4,
    };
    let f = init_field(
        &cfg,
        task,
        grid,
        VqConfig { bitwidth: 3 },
        &Occupancy::Dense,
        render,
    )
    .unwrap();
    let mut f = f.baked().unwrap();
    // Quantize exactly as the stream stores them so comparisons are exact.
    f = vqad::codec::decode(&encode(&f).unwrap()).unwrap();
    f
}

fn decode(bytes: &[u8]) -> (VqadStatus, *mut VqadModel) {
    let mut m = ptr::null_mut();
    let s = unsafe { vqad_decode(bytes.as_ptr(), bytes.len(), &mut m) };
    (s, m)
}

fn last_error() -> String {
    let mut buf = [0 as c_char; 512];
    let n = unsafe { vqad_last_error_message(buf.as_mut_ptr(), buf.len()) };
    let s: Vec<u8> = buf
        .iter()
        .take_while(|c| **c != 0)
        .map(|c| *c as u8)
        .collect();
    assert_eq!(s.len(), n.min(511));
    String::from_utf8(s).unwrap()
}

#[test]
fn decode_and_query_image_model() {
    let field = model(TaskKind::Image, TrainMode::Vqad);
    let bytes = encode(&field).unwrap();
    let (s, m) = decode(&bytes);
    assert_eq!(s, VqadStatus::Ok);
    let (mut levels, mut task) = (0, VqadTask::Sdf);
    let (mut din, mut dout) = (0, 0);
    unsafe {
        assert_eq!(vqad_levels(m, &mut levels), VqadStatus::Ok);
        assert_eq!(vqad_task(m, &mut task), VqadStatus::Ok);
        assert_eq!(vqad_dims(m, &mut din, &mut dout), VqadStatus::Ok);
    }
    assert_eq!((levels, task, din, dout), (3, VqadTask::Image, 2, 3));

    for (x, lod) in [([0.3, -0.7], 2), ([-1.0, 1.0], 0), ([0.01, 0.5], 1)] {
        let mut y = [0.0; 3];
        let mut written = 0;
        let s = unsafe {
            vqad_decode_point(
                m,
                x.as_ptr(),
                2,
                ptr::null(),
                lod,
                y.as_mut_ptr(),
                3,
                &mut written,
            )
        };
        assert_eq!(s, VqadStatus::Ok);
        assert_eq!(written, 3);
        assert_eq!(y.to_vec(), field.decode_point(&x, None, lod).unwrap());
    }

    let mut small = [0.0; 2];
    let mut written = 0;
    let s = unsafe {
        vqad_decode_point(
            m,
            [0.0, 0.0].as_ptr(),
            2,
            ptr::null(),
            0,
            small.as_mut_ptr(),
            2,
            &mut written,
        )
    };
    assert_eq!((s, written), (VqadStatus::BufferTooSmall, 3));
    let s = unsafe {
        vqad_decode_point(
            m,
            [0.0, 0.0].as_ptr(),
            2,
            ptr::null(),
            3,
            small.as_mut_ptr(),
            3,
            ptr::null_mut(),
        )
    };
    assert_eq!(s, VqadStatus::InvalidArgument);
    assert!(last_error().contains("lod"));
    let s = unsafe {
        vqad_decode_point(
            m,
            [5.0, 0.0].as_ptr(),
            2,
            ptr::null(),
            0,
            small.as_mut_ptr(),
            3,
            ptr::null_mut(),
        )
    };
    assert_eq!(s, VqadStatus::InvalidArgument);

    let mut rgba = [0.0; 4];
    let s = unsafe {
        vqad_render_ray(
            m,
            [0.0; 3].as_ptr(),
            [1.0, 0.0, 0.0].as_ptr(),
            0.0,
            1.0,
            0,
            rgba.as_mut_ptr(),
        )
    };
    assert_eq!(s, VqadStatus::InvalidArgument);

    let mut r = VqadSizeReport::default();
    unsafe {
        assert_eq!(vqad_size_report(m, &mut r), VqadStatus::Ok);
        vqad_free(m);
    }
    let want = size_report(&field).unwrap();
    assert_eq!(r.total, bytes.len());
    assert_eq!(
        r.header + r.mlp + r.structure + r.codebooks + r.indices + r.features,
        r.total
    );
    assert_eq!(
        (r.indices, r.codebooks),
        (want.index_bytes(), want.codebook_bytes())
    );
    assert_eq!(r.compression_ratio, want.compression_ratio());
}

#[test]
fn render_ray_matches_library() {
    let field = model(TaskKind::Radiance, TrainMode::Uncompressed);
    let (s, m) = decode(&encode(&field).unwrap());
    assert_eq!(s, VqadStatus::Ok);
    let origin = [-2.0, 0.1, 0.3];
    let dir = [1.0, 0.05, -0.1];
    let mut rgba = [0.0; 4];
    let s = unsafe {
        vqad_render_ray(
            m,
            origin.as_ptr(),
            dir.as_ptr(),
            0.0,
            5.0,
            2,
            rgba.as_mut_ptr(),
        )
    };
    assert_eq!(s, VqadStatus::Ok);
    let c = field
        .render_ray(&vqad::field::Ray::new(origin, dir, 0.0, 5.0).unwrap(), 2)
        .unwrap();
    assert_eq!(rgba, [c.rgb[0], c.rgb[1], c.rgb[2], c.opacity]);

    let mut y = [0.0; 4];
    let s = unsafe {
        vqad_decode_point(
            m,
            [0.0; 3].as_ptr(),
            3,
            ptr::null(),
            0,
            y.as_mut_ptr(),
            4,
            ptr::null_mut(),
        )
    };
    assert_eq!(s, VqadStatus::InvalidArgument);
    assert!(last_error().contains("direction"), "{}", last_error());
    let s = unsafe {
        vqad_decode_point(
            m,
            [0.0; 3].as_ptr(),
            3,
            dir.as_ptr(),
            0,
            y.as_mut_ptr(),
            4,
            ptr::null_mut(),
        )
    };
    assert_eq!(s, VqadStatus::Ok);
    let zero_dir = unsafe {
        vqad_render_ray(
            m,
            origin.as_ptr(),
            [0.0; 3].as_ptr(),
            0.0,
            5.0,
            0,
            rgba.as_mut_ptr(),
        )
    };
    assert_eq!(zero_dir, VqadStatus::InvalidArgument);
    unsafe { vqad_free(m) };
}

#[test]
fn prefixes_and_bad_input() {
    let field = model(TaskKind::Sdf, TrainMode::RandomIndex);
    let bytes = encode(&field).unwrap();
    let ends = vqad::codec::level_ends(&bytes).unwrap();
    for (l, &end) in ends.iter().enumerate() {
        let mut n = 99;
        assert_eq!(
            unsafe { vqad_complete_levels(bytes.as_ptr(), end, &mut n) },
            VqadStatus::Ok
        );
        assert_eq!(n, l + 1);
        assert_eq!(
            unsafe { vqad_complete_levels(bytes.as_ptr(), end - 1, &mut n) },
            VqadStatus::Ok
        );
        assert_eq!(n, l);

        let mut m = ptr::null_mut();
        assert_eq!(
            unsafe { vqad_decode_prefix(bytes.as_ptr(), end, l + 1, &mut m) },
            VqadStatus::Ok
        );
        let mut levels = 0;
        unsafe {
            vqad_levels(m, &mut levels);
            vqad_free(m);
        }
        assert_eq!(levels, l + 1);
        let s = unsafe { vqad_decode_prefix(bytes.as_ptr(), end - 1, l + 1, &mut m) };
        assert_eq!(s, VqadStatus::Truncated);
    }

    assert_eq!(decode(&bytes[..bytes.len() - 1]).0, VqadStatus::Truncated);
    let mut junk = bytes.clone();
    junk[0] = b'X';
    assert_eq!(decode(&junk).0, VqadStatus::InvalidStream);
    assert!(!last_error().is_empty());
    assert_eq!(decode(&[]).0, VqadStatus::Truncated);

    let mut m = ptr::null_mut();
    assert_eq!(
        unsafe { vqad_decode(ptr::null(), 10, &mut m) },
        VqadStatus::NullPointer
    );
    assert_eq!(
        unsafe { vqad_decode(bytes.as_ptr(), bytes.len(), ptr::null_mut()) },
        VqadStatus::NullPointer
    );
    let mut n = 0;
    assert_eq!(
        unsafe { vqad_levels(ptr::null(), &mut n) },
        VqadStatus::NullPointer
    );
    unsafe { vqad_free(ptr::null_mut()) };

    // Success clears the message; a null buffer reports its length.
    let (s, m) = decode(&bytes);
    assert_eq!(s, VqadStatus::Ok);
    assert_eq!(unsafe { vqad_last_error_message(ptr::null_mut(), 0) }, 0);
    unsafe { vqad_free(m) };
}

#[test]
fn compression_ratio_formula() {
    assert!((vqad_compression_ratio(1e6, 16.0, 6.0) - 42.66).abs() < 0.01);
}

#[test]
fn header_declares_every_entry_point() {
    let header =
        std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/vqad.h")).unwrap();
    for f in [
        "vqad_decode(",
        "vqad_decode_prefix(",
        "vqad_complete_levels(",
        "vqad_free(",
        "vqad_levels(",
        "vqad_task(",
        "vqad_dims(",
        "vqad_decode_point(",
        "vqad_render_ray(",
        "vqad_size_report(",
        "vqad_compression_ratio(",
        "vqad_last_error_message(",
        "typedef struct VqadModel VqadModel;",
        "VQAD_STATUS_TRUNCATED = 4",
    ] {
        assert!(header.contains(f), "header lacks {f}");
    }
}

/// `target/<profile>`, found from this test binary in `target/<profile>/deps`.
fn profile_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_static_library() {
    let lib = profile_dir().join("libvqad_ffi.a");
    if !lib.exists() || Command::new("cc").arg("--version").output().is_err() {
        eprintln!(
            "skipping: no C compiler or static library at {}",
            lib.display()
        );
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let out = Command::new("cc")
        .arg(manifest.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let field = model(TaskKind::Image, TrainMode::Vqad);
    let bytes = encode(&field).unwrap();
    let stream = dir.path().join("m.vqad");
    std::fs::write(&stream, &bytes).unwrap();
    let out = Command::new(&exe).arg(&stream).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status);
    let text = String::from_utf8(out.stdout).unwrap();
    let parts: Vec<&str> = text.split_whitespace().collect();
    assert_eq!(&parts[..3], &["3", "0", "3"]);
    let y = field.decode_point(&[0.25, -0.5], None, 2).unwrap();
    for (p, v) in parts[3..6].iter().zip(&y) {
        assert_eq!(p.parse::<f64>().unwrap(), *v);
    }
    assert_eq!(parts[6].parse::<usize>().unwrap(), bytes.len());
}
