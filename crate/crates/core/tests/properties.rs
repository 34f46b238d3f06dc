use proptest::prelude::*;

use climrank::downscale::Scaler;
use climrank::geogrid::{regrid_bilinear, AxisKind, Calendar, CubeMeta, DataCube, Date, GridAxis, Variable};
use climrank::metrics::Metric;
use climrank::ranking::{entropy_target_weights, featurize, normalize, topsis_score, Criterion, DecisionMatrix, WeightVector};

fn matrix() -> impl Strategy<Value = DecisionMatrix> {
    (2usize..7, 1usize..10).prop_flat_map(|(m, k)| {
        (prop::collection::vec(0.01f64..100.0, m * k), prop::collection::vec(any::<bool>(), k)).prop_map(move |(values, benefit)| {
            let criteria = (0..k)
                .map(|j| {
                    let metric = if benefit[j] { Metric::Kge } else { Metric::Rmse };
                    Criterion::of(metric)
                })
                .collect();
            DecisionMatrix::new((0..m).map(|i| format!("m{i}")).collect(), criteria, values).unwrap()
        })
    })
}

proptest! {
    #[test]
    fn closeness_is_a_unit_interval_score(c in matrix()) {
        let w = entropy_target_weights(&c);
        let r = topsis_score(&c.models, &normalize(&c), &w, &c.criteria).unwrap();
        for s in &r.scores {
            prop_assert!((0.0..=1.0).contains(&s.cc));
            prop_assert!(s.d_plus >= 0.0 && s.d_minus >= 0.0);
        }
        let mut sorted: Vec<usize> = r.order.clone();
        sorted.sort();
        prop_assert_eq!(sorted, (0..c.rows()).collect::<Vec<_>>());
    }

    #[test]
    fn entropy_weights_are_a_simplex_point(c in matrix()) {
        let w = entropy_target_weights(&c);
        prop_assert!(WeightVector::new(w.as_slice().to_vec()).is_ok());
        prop_assert_eq!(featurize(&c).len(), 5 * c.cols());
    }

    #[test]
    fn normalized_columns_have_unit_norm(c in matrix()) {
        let n = normalize(&c);
        for j in 0..c.cols() {
            let norm: f64 = (0..c.rows()).map(|i| n[i * c.cols() + j].powi(2)).sum();
            prop_assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn scaler_round_trips(values in prop::collection::vec(-50.0f64..50.0, 2..64), probe in -100.0f64..100.0) {
        let s = Scaler::fit(&values);
        prop_assert!(s.sd > 0.0);
        prop_assert!((s.inverse(s.apply(probe)) - probe).abs() < 1e-9);
    }

    #[test]
    fn regrid_reproduces_planes(a in -5.0f64..5.0, b in -5.0f64..5.0, c in -5.0f64..5.0,
                                lat in prop::collection::vec(0.0f64..3.0, 1..6),
                                lon in prop::collection::vec(0.0f64..4.0, 1..6)) {
        let src_lat: Vec<f64> = (0..4).map(|i| i as f64).collect();
        let src_lon: Vec<f64> = (0..5).map(|j| j as f64).collect();
        let data = src_lat.iter().flat_map(|&y| src_lon.iter().map(move |&x| a + b * y + c * x)).collect();
        let meta = CubeMeta::celsius(Variable::Tasmax, Calendar::NoLeap);
        let cube = DataCube::new(meta, vec![Date::new(2000, 1, 1)], GridAxis::lat(src_lat).unwrap(), GridAxis::lon(src_lon).unwrap(), data).unwrap();
        let mut lat = lat;
        let mut lon = lon;
        lat.sort_by(f64::total_cmp);
        lat.dedup();
        lon.sort_by(f64::total_cmp);
        lon.dedup();
        let out = regrid_bilinear(&cube, &GridAxis::new(AxisKind::Lat, lat.clone()).unwrap(), &GridAxis::new(AxisKind::Lon, lon.clone()).unwrap()).unwrap();
        for (i, y) in lat.iter().enumerate() {
            for (j, x) in lon.iter().enumerate() {
                prop_assert!((out.get(0, i, j) - (a + b * y + c * x)).abs() < 1e-9);
            }
        }
    }
}
