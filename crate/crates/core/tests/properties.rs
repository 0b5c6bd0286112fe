use proptest::prelude::*;

use sto2::dataset::{augment, AugmentConfig, Sample};
use sto2::fibre::{
    apply_mask, centres_in_bundle, generate_mask, BundleSpec, LatticeAnchor, SparseHypercube,
};
use sto2::hypercube::{
    load_cube, project_rgb, save_cube, Hypercube, PixelCode, PixelMask, RgbImage, SpectralResponse,
    WavelengthGrid,
};
use sto2::metrics::{mean_prediction_error, p_hap, ssim, SsimParams, HAP_THRESHOLD};
use sto2::nn::{Tape, Tensor};
use sto2::oximetry::{
    attenuation, estimate_sto2_map, fit_pixel, flat_white_reference, forward_spectrum, reflectance,
    ChromophoreTable, StO2Map,
};
use sto2::raster::{Flip, Planes};

fn grid() -> WavelengthGrid {
    ChromophoreTable::reference().grid
}

fn cube_from(width: usize, height: usize, data: Vec<f32>) -> Hypercube {
    Hypercube::new(width, height, grid(), data).unwrap()
}

fn full_mask(w: usize, h: usize) -> PixelMask {
    PixelMask::new(w, h, PixelCode::Effective)
}

fn map(w: usize, h: usize, values: Vec<f32>, mask: PixelMask) -> StO2Map {
    StO2Map::new(w, h, values, mask).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn rgb_projection_is_linear(
        a in 0.0f32..3.0,
        b in 0.0f32..3.0,
        seed in any::<u64>(),
    ) {
        let (w, h) = (5, 4);
        let n = 24 * w * h;
        let v1: Vec<f32> = (0..n).map(|i| ((i as u64 * 31 + seed % 97) % 101) as f32 / 101.0).collect();
        let v2: Vec<f32> = (0..n).map(|i| ((i as u64 * 17 + seed % 89) % 67) as f32 / 67.0).collect();
        let mix: Vec<f32> = v1.iter().zip(&v2).map(|(x, y)| a * x + b * y).collect();
        let resp = SpectralResponse::gaussian(&grid());
        let p1 = project_rgb(&cube_from(w, h, v1), &resp).unwrap();
        let p2 = project_rgb(&cube_from(w, h, v2), &resp).unwrap();
        let pm = project_rgb(&cube_from(w, h, mix), &resp).unwrap();
        for i in 0..pm.data.len() {
            let expect = a * p1.data[i] + b * p2.data[i];
            prop_assert!((pm.data[i] - expect).abs() <= 1e-5 * (1.0 + expect.abs()));
        }
    }

    #[test]
    fn container_roundtrip_is_bit_exact(
        w in 1usize..9,
        h in 1usize..9,
        bits in prop::collection::vec(any::<u32>(), 24 * 64),
        nan_at in prop::collection::vec(any::<bool>(), 24 * 64),
    ) {
        let data: Vec<f32> = (0..24 * w * h)
            .map(|i| if nan_at[i] { f32::NAN } else { f32::from_bits(bits[i] & 0x7f7f_ffff) })
            .collect();
        let cube = cube_from(w, h, data);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.oxc");
        save_cube(&cube, &path).unwrap();
        let back = load_cube(&path).unwrap();
        prop_assert_eq!(back.grid, cube.grid);
        let a: Vec<u32> = cube.planes.data.iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = back.planes.data.iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn mask_counts_partition_the_image(
        w in 2usize..12,
        h in 2usize..12,
        sto2 in prop::collection::vec(0.0f64..=1.0, 144),
        kind in prop::collection::vec(0u8..5, 144),
    ) {
        let table = ChromophoreTable::reference();
        let white = flat_white_reference(24);
        let mut data = vec![0f32; 24 * w * h];
        for p in 0..w * h {
            let spectrum: Vec<f64> = match kind[p] {
                0 => vec![f64::NAN; 24],
                1 => vec![0.0; 24],
                2 => (0..24).map(|b| if b % 2 == 0 { 0.9 } else { 0.1 }).collect(),
                _ => reflectance(&forward_spectrum(sto2[p], 0.02, 0.1, &table).unwrap(), &white),
            };
            for (b, v) in spectrum.iter().enumerate() {
                data[b * w * h + p] = *v as f32;
            }
        }
        let m = estimate_sto2_map(&cube_from(w, h, data), &white, &table, 0.85).unwrap();
        let c = m.mask.counts();
        prop_assert_eq!(c.total(), w * h);
        prop_assert_eq!(c.effective, m.n_effective());
        prop_assert_eq!(c.saturated, kind[..w * h].iter().filter(|k| **k == 0).count());
    }

    #[test]
    fn sto2_is_invariant_to_total_hb_scale_and_offset(
        sto2 in 0.0f64..=1.0,
        thb in 0.005f64..0.05,
        k in 0.1f64..10.0,
        offset in -0.5f64..0.5,
    ) {
        let table = ChromophoreTable::reference();
        let white = flat_white_reference(24);
        let fit = |thb: f64, off: f64| {
            let i = reflectance(&forward_spectrum(sto2, thb, off, &table).unwrap(), &white);
            fit_pixel(&i, &white, &table).unwrap()
        };
        let base = fit(thb, 0.0);
        let scaled = fit(thb * k, 0.0);
        let shifted = fit(thb, offset);
        prop_assert!((base.sto2().unwrap() - sto2).abs() < 1e-6);
        prop_assert!((scaled.sto2().unwrap() - sto2).abs() < 1e-6);
        prop_assert!((shifted.sto2().unwrap() - sto2).abs() < 1e-6);
        prop_assert!((shifted.offset - base.offset - offset).abs() < 1e-6);
    }

    #[test]
    fn cod_matches_brute_force_r_squared(
        sto2 in 0.0f64..=1.0,
        noise in prop::collection::vec(-0.05f64..0.05, 24),
    ) {
        let table = ChromophoreTable::reference();
        let white = flat_white_reference(24);
        let a: Vec<f64> = forward_spectrum(sto2, 0.02, 0.2, &table)
            .unwrap()
            .iter()
            .zip(&noise)
            .map(|(v, n)| v + n)
            .collect();
        let intensity = reflectance(&a, &white);
        let f = fit_pixel(&intensity, &white, &table).unwrap();
        // The fit sees the attenuation recovered from the intensity.
        let a = attenuation(&intensity, &white).unwrap();
        // Unclamped least squares from the normal equations, by Cramer's rule.
        let cols = [&table.eps_hbo2[..], &table.eps_hb[..], &[1.0; 24][..]];
        let mut m = [[0.0f64; 3]; 3];
        let mut rhs = [0.0f64; 3];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = (0..24).map(|b| cols[i][b] * cols[j][b]).sum();
            }
            rhs[i] = (0..24).map(|b| cols[i][b] * a[b]).sum();
        }
        let det = |m: &[[f64; 3]; 3]| {
            m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
        };
        let d = det(&m);
        let coef: Vec<f64> = (0..3)
            .map(|k| {
                let mut mk = m;
                for (row, r) in mk.iter_mut().zip(rhs) {
                    row[k] = r;
                }
                det(&mk) / d
            })
            .collect();
        let mean = a.iter().sum::<f64>() / 24.0;
        let (mut ss_res, mut ss_tot) = (0.0, 0.0);
        for b in 0..24 {
            let pred = coef[0] * cols[0][b] + coef[1] * cols[1][b] + coef[2];
            ss_res += (a[b] - pred).powi(2);
            ss_tot += (a[b] - mean).powi(2);
        }
        prop_assert!((f.cod - (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)).abs() < 1e-10);
    }

    #[test]
    fn untrimmed_count_grows_with_bundle_radius(
        d in 6.0f64..20.0,
        r0 in 5.0f64..60.0,
        extra in 0.0f64..60.0,
    ) {
        let spec = |radius| BundleSpec::new(1, d / 4.0, d).unwrap().with_bundle_radius(radius);
        let small = centres_in_bundle(&spec(r0), 256, 192, LatticeAnchor::default()).len();
        let large = centres_in_bundle(&spec(r0 + extra), 256, 192, LatticeAnchor::default()).len();
        prop_assert!(large >= small);
    }

    #[test]
    fn apply_mask_is_idempotent(seed in any::<u64>(), preset in prop::sample::select(vec![0usize, 121, 171, 300])) {
        let (w, h) = (256, 192);
        let data: Vec<f32> = (0..24 * w * h).map(|i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f32 / 1000.0).collect();
        let mask = generate_mask(&BundleSpec::preset(preset).unwrap(), w, h, LatticeAnchor::default()).unwrap();
        let once = apply_mask(&cube_from(w, h, data), &mask).unwrap();
        let twice = apply_mask(&once.0, &mask).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn augmentation_count_formula(w in 96usize..400, h in 96usize..400) {
        let cfg = AugmentConfig::default();
        let expected = 3 * ((w - 96) / 16 + 1) * ((h - 96) / 16 + 1);
        prop_assert_eq!(cfg.count(w, h).unwrap(), expected);
        prop_assert_eq!(cfg.windows(w, h).unwrap().len(), expected);
    }

    #[test]
    fn bilinear_resize_stays_in_hull(
        w in 1usize..12,
        h in 1usize..12,
        ow in 1usize..30,
        oh in 1usize..30,
        values in prop::collection::vec(-5.0f32..5.0, 144),
        c in -3.0f32..3.0,
    ) {
        let p = Planes::from_vec(w, h, 1, values[..w * h].to_vec()).unwrap();
        let (lo, hi) = p.data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(l, u), v| (l.min(*v), u.max(*v)));
        let r = p.resize_bilinear(ow, oh);
        prop_assert!(r.data.iter().all(|v| *v >= lo && *v <= hi));
        let k = Planes::filled(w, h, 2, c).resize_bilinear(ow, oh);
        prop_assert!(k.data.iter().all(|v| *v == c));
    }

    #[test]
    fn dag_gradients_add(values in prop::collection::vec(-2.0f64..2.0, 8)) {
        let x0 = Tensor { shape: [1, 2, 2, 2], data: values };
        let grad = |f: &dyn Fn(&mut Tape<f64>, sto2::nn::Var) -> sto2::nn::Var| {
            let mut tape = Tape::new();
            let x = tape.leaf(x0.clone());
            let y = f(&mut tape, x);
            tape.backward(y).unwrap().var(x).unwrap().clone()
        };
        let f = |t: &mut Tape<f64>, x| { let s = t.sigmoid(x); t.mean(s) };
        let g = |t: &mut Tape<f64>, x| { let s = t.tanh(x); let s = t.scale(s, 3.0); t.mean(s) };
        let both = |t: &mut Tape<f64>, x| { let a = f(t, x); let b = g(t, x); t.add(a, b).unwrap() };
        let (gf, gg, gb) = (grad(&f), grad(&g), grad(&both));
        for i in 0..8 {
            prop_assert!((gb.data[i] - gf.data[i] - gg.data[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn e_bar_detects_translation(
        values in prop::collection::vec(0.0f32..1.0, 64),
        c in -0.5f32..0.5,
    ) {
        let gt = map(8, 8, values.clone(), full_mask(8, 8));
        let shifted = map(8, 8, values.iter().map(|v| v + c).collect(), full_mask(8, 8));
        let e = mean_prediction_error(&shifted, &gt).unwrap();
        prop_assert!((e - f64::from(c.abs())).abs() < 1e-6);
    }

    #[test]
    fn p_hap_is_monotone_in_error(
        gt in prop::collection::vec(0.0f32..1.0, 64),
        err in prop::collection::vec(-0.2f32..0.2, 64),
        shrink in prop::collection::vec(0.0f32..=1.0, 64),
    ) {
        let gt_map = map(8, 8, gt.clone(), full_mask(8, 8));
        let big = map(8, 8, gt.iter().zip(&err).map(|(g, e)| g + e).collect(), full_mask(8, 8));
        let small = map(8, 8, gt.iter().zip(&err).zip(&shrink).map(|((g, e), s)| g + e * s).collect(), full_mask(8, 8));
        prop_assert!(p_hap(&small, &gt_map, HAP_THRESHOLD).unwrap() >= p_hap(&big, &gt_map, HAP_THRESHOLD).unwrap());
    }

    #[test]
    fn excluding_a_pixel_is_local(
        gt in prop::collection::vec(0.0f32..1.0, 64),
        pred in prop::collection::vec(0.0f32..1.0, 64),
        k in 0usize..64,
    ) {
        let full = mean_prediction_error(&map(8, 8, pred.clone(), full_mask(8, 8)), &map(8, 8, gt.clone(), full_mask(8, 8))).unwrap();
        let mut m = full_mask(8, 8);
        m.codes[k] = PixelCode::LowCod;
        let drop = mean_prediction_error(&map(8, 8, pred.clone(), m.clone()), &map(8, 8, gt.clone(), m.clone())).unwrap();
        let ek = (f64::from(pred[k]) - f64::from(gt[k])).abs();
        prop_assert!((drop * 63.0 - (full * 64.0 - ek)).abs() < 1e-9);

        let hap = |m: &PixelMask| p_hap(&map(8, 8, pred.clone(), m.clone()), &map(8, 8, gt.clone(), m.clone()), HAP_THRESHOLD).unwrap();
        let hits_full = (hap(&full_mask(8, 8)) * 64.0).round();
        let hit_k = if ek <= 0.05 + 1e-6 { 1.0 } else { 0.0 };
        prop_assert_eq!((hap(&m) * 63.0).round(), hits_full - hit_k);
    }

    #[test]
    fn ssim_is_bounded_and_symmetric(
        a in prop::collection::vec(0.0f32..1.0, 256),
        b in prop::collection::vec(0.0f32..1.0, 256),
    ) {
        let params = SsimParams::default();
        let ma = map(16, 16, a, full_mask(16, 16));
        let mb = map(16, 16, b, full_mask(16, 16));
        let ab = ssim(&ma, &mb, &params).unwrap();
        let ba = ssim(&mb, &ma, &params).unwrap();
        prop_assert!(ab <= 1.0 + 1e-12);
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((ssim(&ma, &ma, &params).unwrap() - 1.0).abs() < 1e-12);
    }
}

fn symmetric_sample(w: usize, h: usize) -> Sample {
    let mirror = |c: usize, x: usize, y: usize| {
        let xs = x.min(w - 1 - x);
        ((c * 7 + xs * 13 + y * 5) % 23) as f32 / 23.0
    };
    let planes = |channels: usize| {
        let mut p = Planes::zeros(w, h, channels);
        for c in 0..channels {
            for y in 0..h {
                for x in 0..w {
                    p.set(c, x, y, mirror(c, x, y));
                }
            }
        }
        p
    };
    Sample {
        id: "sym".into(),
        animal_id: 0,
        rgb: RgbImage(planes(3)),
        shsi: SparseHypercube(Hypercube {
            grid: grid(),
            planes: planes(24),
        }),
        target: StO2Map::new(w, h, planes(1).data, full_mask(w, h)).unwrap(),
    }
}

#[test]
fn flips_of_symmetric_rasters_pair_up() {
    let (w, h) = (96 + 16 * 3, 96 + 16);
    let sample = symmetric_sample(w, h);
    let cfg = AugmentConfig {
        out_width: 96,
        out_height: 96,
        ..Default::default()
    };
    let windows = cfg.windows(w, h).unwrap();
    let crops = augment(&sample, &cfg).unwrap();
    assert_eq!(crops.len(), windows.len());
    let mut pairs = 0;
    for (i, (flip, win)) in windows.iter().enumerate() {
        if *flip != Flip::Identity {
            continue;
        }
        let mirrored = w - cfg.crop - win.x;
        let j = windows
            .iter()
            .position(|(f, v)| *f == Flip::Horizontal && v.x == mirrored && v.y == win.y)
            .unwrap();
        assert_eq!(crops[i].rgb, crops[j].rgb);
        assert_eq!(crops[i].shsi, crops[j].shsi);
        assert_eq!(crops[i].target.values, crops[j].target.values);
        pairs += 1;
    }
    assert_eq!(pairs, windows.len() / 3);
}
