use coralseg::config::RunConfig;
use coralseg::data::generate_dataset;
use coralseg::trainer::{self, predict_mask};

#[test]
fn error_anatomy() {
    std::env::set_var("CORALSEG_PROJ_GAIN", "10.0");
    for (ccm, dfp, name) in [(false, false, "baseline"), (true, true, "full")] {
        let mut agg_fp_decoyish = 0usize; // false positives far from true shape
        let mut agg_fp_near = 0usize;     // false positives adjacent to the shape
        let mut agg_fn_edge = 0usize;     // misses on the mask boundary band
        let mut agg_fn_core = 0usize;     // misses deep inside
        for seed in [42u64, 43] {
            let mut cfg = RunConfig::default();
            cfg.seed = seed;
            cfg.difficulty = 0.85;
            cfg.crop = 12;
            cfg.ccm_on = ccm;
            cfg.dfp_on = dfp;
            let samples = generate_dataset(cfg.count, cfg.size, cfg.seed, cfg.difficulty).unwrap();
            let out = trainer::train(&cfg, &samples[..80]).unwrap();
            for s in &samples[80..] {
                let pred = predict_mask(&out.state, &s.image).unwrap();
                let (h, w) = (s.image.h, s.image.w);
                let near = |y: usize, x: usize| -> bool {
                    // within 2 px of any true fg pixel
                    for dy in -2i64..=2 {
                        for dx in -2i64..=2 {
                            let ny = y as i64 + dy; let nx = x as i64 + dx;
                            if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w
                                && s.mask[ny as usize * w + nx as usize] == 1 { return true; }
                        }
                    }
                    false
                };
                for y in 0..h {
                    for x in 0..w {
                        let i = y * w + x;
                        match (pred[i] > 0, s.mask[i] > 0) {
                            (true, false) => {
                                if near(y, x) { agg_fp_near += 1 } else { agg_fp_decoyish += 1 }
                            }
                            (false, true) => {
                                if near(y, x) && {
                                    // boundary band: true fg with a bg 4-neighbor within 2
                                    let mut edge = false;
                                    'e: for dy in -2i64..=2 { for dx in -2i64..=2 {
                                        let ny = y as i64 + dy; let nx = x as i64 + dx;
                                        if ny < 0 || nx < 0 || ny as usize >= h || nx as usize >= w { edge = true; break 'e; }
                                        if s.mask[ny as usize * w + nx as usize] == 0 { edge = true; break 'e; }
                                    }}
                                    edge
                                } { agg_fn_edge += 1 } else { agg_fn_core += 1 }
                            }
                            _ => {}
                        }
                    }
                }
            }
        }
        eprintln!("{name}: FP far(decoyish)={agg_fp_decoyish} FP near-boundary={agg_fp_near} FN edge={agg_fn_edge} FN core={agg_fn_core}");
    }
}
