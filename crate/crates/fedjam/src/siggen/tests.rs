use super::*;

fn quiet_cfg(n: usize, seed: u64) -> SignalConfig {
    SignalConfig {
        num_samples: n,
        noise_power: 0.0,
        signal_power: 0.0,
        jsr_db: 0.0,
        rng_seed: seed,
        ..SignalConfig::default()
    }
}

#[test]
fn class_codes_round_trip() {
    for (i, class) in JammerClass::ALL.into_iter().enumerate() {
        assert_eq!(class.code() as usize, i);
        assert_eq!(JammerClass::from_code(class.code()).unwrap(), class);
        assert_eq!(class.name().parse::<JammerClass>().unwrap(), class);
    }
    assert!(JammerClass::from_code(6).is_err());
    assert!("wideband".parse::<JammerClass>().is_err());
}

#[test]
fn nojam_with_all_powers_zero_is_silent() {
    let cfg = quiet_cfg(512, 3);
    let r = synthesize_signal(&cfg, JammerClass::NoJam).unwrap();
    assert!(r.iter().all(|&x| x == 0.0));
}

#[test]
fn chirp_instantaneous_frequency_sweeps_fa_to_fb() {
    // Single sweep over the whole record, jammer term alone. The oracle
    // recovers instantaneous frequency by phase differencing:
    // (r[n-1] + r[n+1]) / (2 r[n]) = cos(2 pi f(n)) up to the chirp rate.
    let fa = 0.05;
    let fb = 0.45;
    let mut cfg = quiet_cfg(4096, 11);
    cfg.class_params.chirp = ChirpParams {
        f_start: (fa, fa),
        f_end: (fb, fb),
        period: 0,
    };
    let r = synthesize_signal(&cfg, JammerClass::Chirp).unwrap();
    let peak = r.iter().fold(0.0f64, |m, &x| m.max(x.abs()));

    let freq_at = |n: usize| -> Option<f64> {
        if r[n].abs() < 0.5 * peak {
            return None;
        }
        let ratio = ((r[n - 1] + r[n + 1]) / (2.0 * r[n])).clamp(-1.0, 1.0);
        Some(ratio.acos() / TAU)
    };
    let near_start = (1..200).find_map(freq_at).expect("no usable start sample");
    let near_end = (r.len() - 200..r.len() - 1)
        .rev()
        .find_map(freq_at)
        .expect("no usable end sample");
    assert!((near_start - fa).abs() < 0.01, "start freq {near_start} vs {fa}");
    assert!((near_end - fb).abs() < 0.01, "end freq {near_end} vs {fb}");
}

#[test]
fn dme_active_fraction_tracks_duty_cycle() {
    let mut cfg = quiet_cfg(16384, 7);
    cfg.class_params.dme.duty_cycle = 0.1;
    let r = synthesize_signal(&cfg, JammerClass::Dme).unwrap();
    let peak = r.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    assert!(peak > 0.0);
    let active = r.iter().filter(|&&x| x.abs() > 1e-6 * peak).count();
    let fraction = active as f64 / r.len() as f64;
    assert!(
        (0.05..=0.15).contains(&fraction),
        "active fraction {fraction}"
    );
}

#[test]
fn jammer_power_honors_jsr_over_active_portion() {
    // Default signal power is 1 and chips are exactly +-1, so the empirical
    // ratio should track the configured JSR tightly.
    for class in [
        JammerClass::Am,
        JammerClass::Chirp,
        JammerClass::Fm,
        JammerClass::Dme,
        JammerClass::Nb,
    ] {
        for (jsr, seed) in [(12.7, 21u64), (30.0, 22)] {
            let cfg = SignalConfig {
                jsr_db: jsr,
                rng_seed: seed,
                ..SignalConfig::default()
            };
            let parts = synthesize_parts(&cfg, class).unwrap();
            let pj = mean_power(&parts.jammer, &parts.jammer_active);
            let ps: f64 =
                parts.signal.iter().map(|x| x * x).sum::<f64>() / parts.signal.len() as f64;
            let ratio_db = 10.0 * (pj / ps).log10();
            assert!(
                (ratio_db - jsr).abs() < 0.5,
                "{class}: measured {ratio_db} dB vs configured {jsr} dB"
            );
            let target = cfg.jammer_power();
            assert!(
                (pj - target).abs() / target < 0.05,
                "{class}: active-portion power {pj} vs target {target}"
            );
        }
    }
}

#[test]
fn synthesis_is_deterministic() {
    let cfg = SignalConfig {
        rng_seed: 99,
        ..SignalConfig::default()
    };
    for class in JammerClass::ALL {
        let a = synthesize_signal(&cfg, class).unwrap();
        let b = synthesize_signal(&cfg, class).unwrap();
        assert_eq!(a, b, "{class}");
    }
}

#[test]
fn invalid_signal_configs_are_rejected() {
    let mut cfg = SignalConfig::default();
    cfg.num_samples = 0;
    assert!(matches!(
        synthesize_signal(&cfg, JammerClass::Am),
        Err(crate::error::Error::Config(_))
    ));
    let mut cfg = SignalConfig::default();
    cfg.noise_power = -1.0;
    assert!(synthesize_signal(&cfg, JammerClass::Am).is_err());
    let mut cfg = SignalConfig::default();
    cfg.jsr_db = f64::NAN;
    assert!(synthesize_signal(&cfg, JammerClass::Am).is_err());
    let mut cfg = SignalConfig::default();
    cfg.class_params.dme.duty_cycle = 0.0;
    assert!(synthesize_signal(&cfg, JammerClass::Dme).is_err());
}

fn small_gen(per_class: usize, classes: Vec<JammerClass>, master_seed: u64) -> GenConfig {
    GenConfig {
        per_class,
        classes,
        signal: SignalConfig {
            num_samples: 2048,
            ..SignalConfig::default()
        },
        jsr_db: (20.0, 40.0),
        stft: StftConfig {
            window_len: 64,
            hop: 32,
            window: WindowKind::Hann,
        },
        render: RenderConfig {
            out_h: 16,
            out_w: 16,
            ..RenderConfig::default()
        },
        master_seed,
    }
}

#[test]
fn generate_single_record() {
    let gen = small_gen(1, vec![JammerClass::NoJam], 5);
    let records = generate_dataset(&gen).unwrap();
    assert_eq!(records.len(), 1);
    assert_eq!(records[0].label, JammerClass::NoJam);
    assert_eq!(records[0].pixels.len(), 16 * 16);
}

#[test]
fn generate_balanced_labels() {
    let gen = small_gen(10, JammerClass::ALL.to_vec(), 6);
    let records = generate_dataset(&gen).unwrap();
    assert_eq!(records.len(), 60);
    for class in JammerClass::ALL {
        assert_eq!(records.iter().filter(|r| r.label == class).count(), 10);
    }
}

#[test]
fn generate_is_bit_identical_across_runs() {
    let gen = small_gen(2, JammerClass::ALL.to_vec(), 1234);
    let a = generate_dataset(&gen).unwrap();
    let b = generate_dataset(&gen).unwrap();
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.pixels, y.pixels);
        assert_eq!(x.meta.seed, y.meta.seed);
        assert_eq!(x.meta.jsr_db, y.meta.jsr_db);
    }
}

#[test]
fn generate_rejects_bad_configs() {
    let gen = small_gen(0, vec![JammerClass::Am], 1);
    assert!(generate_dataset(&gen).is_err());
    let gen = small_gen(1, vec![], 1);
    assert!(generate_dataset(&gen).is_err());
    let gen = small_gen(1, vec![JammerClass::Am, JammerClass::Am], 1);
    assert!(generate_dataset(&gen).is_err());
    let mut gen = small_gen(1, vec![JammerClass::Am], 1);
    gen.jsr_db = (40.0, 20.0);
    assert!(generate_dataset(&gen).is_err());
}

#[test]
fn spectrogram_pixels_span_full_range() {
    // After min-max normalization each non-constant image touches 0 and 255.
    let gen = small_gen(2, JammerClass::ALL.to_vec(), 77);
    for rec in generate_dataset(&gen).unwrap() {
        let lo = *rec.pixels.iter().min().unwrap();
        let hi = *rec.pixels.iter().max().unwrap();
        assert_eq!((lo, hi), (0, 255), "{}", rec.label);
    }
}

#[test]
fn mean_class_images_are_pairwise_distinct() {
    let gen = GenConfig {
        per_class: 3,
        signal: SignalConfig {
            num_samples: 2048,
            noise_power: 0.01,
            ..SignalConfig::default()
        },
        jsr_db: (25.0, 25.0),
        ..small_gen(3, JammerClass::ALL.to_vec(), 42)
    };
    let records = generate_dataset(&gen).unwrap();
    let dim = 16 * 16;
    let mut means = vec![vec![0.0f64; dim]; JammerClass::COUNT];
    for rec in &records {
        let m = &mut means[rec.label.code() as usize];
        for (acc, &p) in m.iter_mut().zip(&rec.pixels) {
            *acc += p as f64 / gen.per_class as f64;
        }
    }
    for a in 0..JammerClass::COUNT {
        for b in a + 1..JammerClass::COUNT {
            let l1: f64 = means[a]
                .iter()
                .zip(&means[b])
                .map(|(x, y)| (x - y).abs())
                .sum();
            assert!(l1 > 0.0, "classes {a} and {b} have identical mean images");
        }
    }
}
