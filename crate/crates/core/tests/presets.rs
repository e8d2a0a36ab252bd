mod oracles;

use oracles::{cover_oracle, decimate_oracle};
use proptest::prelude::*;
use reedsb_core::frame::Frame;
use reedsb_core::presets::*;

#[test]
fn table_matches_golden_file() {
    let golden = include_str!("data/presets_golden.csv");
    assert_eq!(table_csv(), golden);
}

#[test]
fn geometry_for_every_preset_matches_oracle() {
    for p in presets() {
        let g = crop_geometry(3208, 2200, p);
        let want = cover_oracle(3208, 2200, p.width as u64, p.height as u64);
        assert_eq!(
            (g.scaled_w as u64, g.scaled_h as u64, g.crop_x as u64, g.crop_y as u64),
            want,
            "preset {}",
            p.preset_id
        );
        assert_eq!((g.out_w, g.out_h), (p.width, p.height));
    }
}

#[test]
fn derived_crop_offsets() {
    assert_eq!(crop_geometry(3208, 2200, &PRESETS[1]).crop_y, 18);
    assert_eq!(crop_geometry(3208, 2200, &PRESETS[2]).crop_y, 218);
}

#[test]
fn selection_parsing() {
    assert_eq!(parse_selection("all").unwrap().len(), 12);
    let ids: Vec<u16> = parse_selection("11, 3,7,3").unwrap().iter().map(|p| p.preset_id).collect();
    assert_eq!(ids, [3, 7, 11]);
    assert!(parse_selection("12").is_err());
    assert!(parse_selection("x").is_err());
}

#[test]
fn resample_keeps_constant_frames_constant() {
    let frame = Frame::constant(3208, 2200, 1, 10, 777);
    for p in presets() {
        let g = crop_geometry(3208, 2200, p);
        let out = resample(&frame, &g).unwrap();
        assert_eq!((out.width, out.height), (p.width, p.height));
        assert!(out.data.iter().all(|&v| v == 777), "preset {}", p.preset_id);
    }
}

#[test]
fn decimation_of_one_second_at_91_hz() {
    let ts: Vec<u64> = (0..91u64).map(|k| k * 1_000_000_000 / 91).collect();
    for hz in [30u64, 10] {
        let got = decimate(&ts, hz * 1000).unwrap();
        assert_eq!(got, decimate_oracle(&ts, hz * 1000), "{hz} Hz");
        assert_eq!(got.len() as u64, hz);
    }
    assert_eq!(decimate(&ts, 91_000).unwrap(), (0..91).collect::<Vec<_>>());
}

proptest! {
    #[test]
    fn geometry_matches_oracle_for_any_downscale(
        src_w in 64u32..4000, src_h in 64u32..4000, fw in 0.05f64..1.0, fh in 0.05f64..1.0,
    ) {
        let out_w = ((src_w as f64 * fw) as u32).max(1);
        let out_h = ((src_h as f64 * fh) as u32).max(1);
        let g = cover_geometry(src_w, src_h, out_w, out_h);
        let want = cover_oracle(src_w as u64, src_h as u64, out_w as u64, out_h as u64);
        prop_assert_eq!((g.scaled_w as u64, g.scaled_h as u64, g.crop_x as u64, g.crop_y as u64), want);
    }

    #[test]
    fn decimation_matches_oracle(
        gaps in proptest::collection::vec(1u64..50_000_000, 1..120),
        target_hz in 1u64..20,
    ) {
        let mut ts = vec![1_000u64];
        for g in gaps {
            ts.push(ts.last().unwrap() + g);
        }
        if let Ok(got) = decimate(&ts, target_hz * 1000) {
            prop_assert_eq!(got, decimate_oracle(&ts, target_hz * 1000));
        }
    }
}
