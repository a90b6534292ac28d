use autodalk::dsp::DepthAxis;
use autodalk::tracker::*;
use proptest::prelude::*;

fn riccati_fixed_point(q: f64, r: f64) -> f64 {
    // p = (p + q) r / (p + q + r)  =>  p^2 + q p - q r = 0
    (-q + (q * q + 4.0 * q * r).sqrt()) / 2.0
}

#[test]
fn steady_state_variance_solves_riccati() {
    let mut k = KalmanState::new(0.0);
    for i in 0..10_000 {
        k.update((i % 7) as f64);
    }
    let p = riccati_fixed_point(KALMAN_Q, KALMAN_R);
    assert!((k.p - p).abs() <= 1e-9 * p, "{} vs {p}", k.p);
}

#[test]
fn single_step_by_hand() {
    let mut k = KalmanState::new(0.0);
    let gain = k.update(100.0);
    let p_pred = 1.0 + 1e-5;
    assert!((gain - p_pred / (p_pred + 1.0)).abs() < 1e-15);
    assert!((k.x_hat - 50.0002).abs() < 1e-4);
}

/// Blended window input recomputed from scratch.
fn blended(history: &[f64]) -> f64 {
    let tail = &history[history.len().saturating_sub(WINDOW_CAPACITY)..];
    if tail.len() <= WINDOW_HALF {
        return *tail.last().unwrap();
    }
    let (old, new) = tail.split_at(tail.len() - WINDOW_HALF);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    0.7 * mean(new) + 0.3 * mean(old)
}

proptest! {
    #[test]
    fn variance_ignores_observations(a in prop::collection::vec(-1e3f64..1e3, 1..300), b in prop::collection::vec(-1e3f64..1e3, 300)) {
        let (mut ka, mut kb) = (KalmanState::new(0.0), KalmanState::new(5.0));
        let mut last = ka.p;
        for (x, y) in a.iter().zip(&b) {
            ka.update(*x);
            kb.update(*y);
            prop_assert_eq!(ka.p, kb.p);
            prop_assert!(ka.p < last);
            last = ka.p;
        }
    }

    #[test]
    fn window_matches_recomputation(zs in prop::collection::vec(-500f64..500.0, 1..260)) {
        let mut w = ObservationWindow::new();
        for i in 0..zs.len() {
            let got = w.push(zs[i]);
            prop_assert!((got - blended(&zs[..=i])).abs() < 1e-9);
        }
        prop_assert_eq!(w.count(), zs.len() as u64);
    }

    #[test]
    fn translation_shifts_estimates(
        epi in prop::collection::vec(600f64..700.0, 1..120),
        thick in 300f64..400.0,
        shift in -200f64..200.0,
    ) {
        let axis = DepthAxis { correction_active: true, ..DepthAxis::default() };
        let edges = EdgeObservation { epi_px: Some(100.0), dm_px: Some(200.0) };
        let (mut a, mut b) = (Tracker::new(TrackerConfig::default()), Tracker::new(TrackerConfig::default()));
        for (i, e) in epi.iter().enumerate() {
            let ra = RawDepths { epi_um: Some(*e), dm_um: Some(e + thick) };
            let rb = RawDepths { epi_um: Some(e + shift), dm_um: Some(e + thick + shift) };
            let ea = a.update(&edges, &ra, &axis, 50.0, i as u64);
            let eb = b.update(&edges, &rb, &axis, 50.0, i as u64);
            prop_assert!((eb.epi_um.unwrap() - ea.epi_um.unwrap() - shift).abs() < 1e-6);
            prop_assert!((eb.dm_um.unwrap() - ea.dm_um.unwrap() - shift).abs() < 1e-6);
        }
    }
}

#[test]
fn invalid_layers_keep_their_state() {
    let axis = DepthAxis { correction_active: true, ..DepthAxis::default() };
    let mut t = Tracker::new(TrackerConfig::default());
    let edges = EdgeObservation { epi_px: Some(100.0), dm_px: Some(200.0) };
    let e1 = t.update(&edges, &RawDepths { epi_um: Some(650.0), dm_um: Some(1000.0) }, &axis, 0.0, 0);
    let e2 = t.update(&EdgeObservation { epi_px: Some(100.0), dm_px: None }, &RawDepths { epi_um: Some(650.0), dm_um: None }, &axis, 20.0, 1);
    assert!(!e2.valid_dm);
    assert_eq!(e2.dm_um, e1.dm_um);
    assert_eq!(e2.gap_above_dm_um, Some(1000.0 - 520.0));
}

#[test]
fn switching_correction_restarts_filters() {
    let edges = EdgeObservation { epi_px: Some(100.0), dm_px: Some(200.0) };
    let mut t = Tracker::new(TrackerConfig::default());
    let off = DepthAxis::default();
    for i in 0..10 {
        t.update(&edges, &RawDepths { epi_um: Some(700.0), dm_um: Some(1200.0) }, &off, 0.0, i);
    }
    let on = DepthAxis { correction_active: true, ..off };
    let e = t.update(&edges, &RawDepths { epi_um: Some(660.0), dm_um: Some(1000.0) }, &on, 0.0, 10);
    assert_eq!(e.dm_um, Some(1000.0));
    assert_eq!(t.dm_state().unwrap().p, 1.0);
}

#[test]
fn raw_depth_offset_scales_with_index_until_corrected() {
    let edges = EdgeObservation { epi_px: Some(100.0), dm_px: Some(180.0) };
    let cfg = TrackerConfig::default();
    let off = DepthAxis::default();
    let on = DepthAxis { correction_active: true, ..off };
    let (a, b) = (raw_depths(&edges, &off, 0.0, cfg.dm_offset_um), raw_depths(&edges, &on, 0.0, cfg.dm_offset_um));
    let post = |ax: &DepthAxis| {
        let e = ax.row_to_optical(100.0);
        ax.to_geometric(ax.row_to_optical(180.0), Some(e))
    };
    assert!((a.dm_um.unwrap() - (post(&off) - cfg.dm_offset_um * off.n_s)).abs() < 1e-9);
    assert!((b.dm_um.unwrap() - (post(&on) - cfg.dm_offset_um)).abs() < 1e-9);
}
