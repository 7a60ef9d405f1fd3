use difflab::coefficients::CoefficientField;
use difflab::distance::{
    default_certificate_tolerance, eikonal_certificate, eikonal_distance, exhaustion_distance,
    set_distance, verify_certificate,
};
use difflab::form::{assemble, DiscreteForm};
use difflab::mesh::Grid;
use difflab::region::RegionSet;
use petgraph::algo::dijkstra;
use petgraph::graph::{NodeIndex, UnGraph};
use proptest::prelude::*;

fn tabulated_1d(cs: &[f64], n_cells: usize) -> DiscreteForm {
    let xs: Vec<f64> = (0..cs.len())
        .map(|i| -4.0 + 8.0 * i as f64 / (cs.len() - 1) as f64)
        .collect();
    let field = CoefficientField::tabulated(xs, cs.to_vec()).unwrap();
    let g = Grid::new_1d(-4.0, 4.0, n_cells).unwrap();
    assemble(&field, &g, None).unwrap()
}

fn oracle_from(form: &DiscreteForm, src: usize) -> Vec<f64> {
    let n = form.n_nodes();
    let mut g = UnGraph::<(), f64>::with_capacity(n, form.edges().len());
    for _ in 0..n {
        g.add_node(());
    }
    for (k, e) in form.edges().iter().enumerate() {
        let l = form.edge_length(k);
        if l.is_finite() {
            g.add_edge(NodeIndex::new(e.u), NodeIndex::new(e.v), l);
        }
    }
    let d = dijkstra(&g, NodeIndex::new(src), None, |e| *e.weight());
    (0..n)
        .map(|i| d.get(&NodeIndex::new(i)).copied().unwrap_or(f64::INFINITY))
        .collect()
}

#[test]
fn matches_petgraph_on_the_obstacle_grid() {
    let g = Grid::new_2d([-2.0, -2.0], [2.0, 2.0], [40, 40]).unwrap();
    let f = assemble(&CoefficientField::c_delta_2d(0.75, 1.0).unwrap(), &g, None).unwrap();
    let cut = f.sever_across([-1.0, 0.0], [1.0, 0.0]);
    for form in [&f, &cut] {
        for src in [0, 17 * 41 + 20, 41 * 41 - 1] {
            let ours =
                eikonal_distance(form, &RegionSet::from_indices(&g, vec![src]).unwrap()).unwrap();
            let theirs = oracle_from(form, src);
            for (a, b) in ours.iter().zip(&theirs) {
                assert!(a == b || (a - b).abs() <= 1e-12 * b.max(1.0), "{a} vs {b}");
            }
        }
    }
}

#[test]
fn matches_petgraph_with_a_degenerate_point() {
    let g = Grid::new_1d(-4.0, 4.0, 256).unwrap();
    let f = assemble(&CoefficientField::c_delta(0.75).unwrap(), &g, None).unwrap();
    let ours = eikonal_distance(&f, &RegionSet::from_indices(&g, vec![3]).unwrap()).unwrap();
    let theirs = oracle_from(&f, 3);
    for (a, b) in ours.iter().zip(&theirs) {
        assert!((a - b).abs() <= 1e-12 * b.max(1.0));
    }
}

/// `int_{-1}^{1} c_{1/4}^{-1/2}` with `x = u^{4/3}` removing the singularity,
/// by composite Simpson on the smooth integrand.
fn quadrature_quarter() -> f64 {
    let n = 20_000;
    let f = |u: f64| {
        let x: f64 = u.powf(4.0 / 3.0);
        (4.0 / 3.0) * (1.0 + x * x).powf(0.125)
    };
    let h = 1.0 / n as f64;
    let mut s = f(0.0) + f(1.0);
    for i in 1..n {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h);
    }
    2.0 * s * h / 3.0
}

#[test]
fn eikonal_matches_quadrature_for_a_sub_critical_degeneracy() {
    let exact = quadrature_quarter();
    // Distance of 0..1 is finite and a bit above 2.
    assert!(exact > 2.0 && exact < 3.0);
    let mut errs = Vec::new();
    for n in [2048, 8192] {
        let g = Grid::new_1d(-8.0, 8.0, n).unwrap();
        let f = assemble(&CoefficientField::c_delta(0.25).unwrap(), &g, None).unwrap();
        let a = RegionSet::interval(&g, -2.0, -1.0).unwrap();
        let b = RegionSet::interval(&g, 1.0, 2.0).unwrap();
        let d = set_distance(&f, &a, &b).unwrap().value;
        errs.push((d - exact).abs() / exact);
    }
    assert!(errs[1] < 2e-3, "{errs:?}");
    assert!(errs[1] < errs[0]);
}

fn coeffs() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.05f64..3.0, 3..9)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn triangle_inequality(cs in coeffs(), i in 0usize..129, j in 0usize..129, k in 0usize..129) {
        let f = tabulated_1d(&cs, 128);
        let g = f.grid().clone();
        let from = |n| eikonal_distance(&f, &RegionSet::from_indices(&g, vec![n]).unwrap()).unwrap();
        let (di, dj) = (from(i), from(j));
        prop_assert!(di[k] <= di[j] + dj[k] + 1e-12);
        prop_assert!((di[j] - dj[i]).abs() <= 1e-12 * di[j].max(1.0));
    }

    #[test]
    fn set_distance_symmetry_and_monotonicity(
        cs in coeffs(),
        a0 in -3.0f64..-1.5, aw in 0.1f64..1.0, grow in 0.0f64..0.5,
        b0 in 0.5f64..2.0, bw in 0.1f64..1.0,
    ) {
        let f = tabulated_1d(&cs, 256);
        let g = f.grid().clone();
        let a = RegionSet::interval(&g, a0, a0 + aw).unwrap();
        let big = RegionSet::interval(&g, a0 - grow, a0 + aw + grow).unwrap();
        let b = RegionSet::interval(&g, b0, b0 + bw).unwrap();
        let ab = set_distance(&f, &a, &b).unwrap().value;
        let ba = set_distance(&f, &b, &a).unwrap().value;
        prop_assert!((ab - ba).abs() <= 1e-12 * ab.max(1.0));
        let bigb = set_distance(&f, &big, &b).unwrap().value;
        prop_assert!(bigb <= ab + 1e-12);
    }

    #[test]
    fn duality_gap(cs in coeffs(), a0 in -3.0f64..-1.0, b0 in 0.5f64..2.5) {
        let f = tabulated_1d(&cs, 512);
        let g = f.grid().clone();
        let a = RegionSet::interval(&g, a0, a0 + 0.5).unwrap();
        let b = RegionSet::interval(&g, b0, b0 + 0.5).unwrap();
        let upper = set_distance(&f, &a, &b).unwrap().value;
        let psi = eikonal_certificate(&f, &b, 1e3).unwrap();
        let cert = verify_certificate(&f, &psi, &a, &b, 1e-12).unwrap();
        prop_assert!(cert.valid);
        prop_assert!(cert.value <= upper + 1e-12);
        let gap = default_certificate_tolerance(&f);
        prop_assert!(upper - cert.value <= gap.max(3.0 * g.dx(0)), "gap {} bound {}", upper - cert.value, gap);
    }

    #[test]
    fn exhaustion_is_monotone(cs in coeffs(), steps in 2usize..6) {
        let f = tabulated_1d(&cs, 256);
        let g = f.grid().clone();
        let a = RegionSet::interval(&g, -3.0, -1.0).unwrap();
        let b = RegionSet::interval(&g, 1.0, 2.0).unwrap();
        let family: Vec<RegionSet> = (1..=steps)
            .map(|k| RegionSet::interval(&g, -3.5, -3.0 + 2.0 * k as f64 / steps as f64).unwrap())
            .collect();
        let ds: Vec<f64> = exhaustion_distance(&f, &a, &b, &family).unwrap().iter().map(|r| r.value).collect();
        for w in ds.windows(2) {
            prop_assert!(w[1] <= w[0]);
        }
        let full = set_distance(&f, &a, &b).unwrap().value;
        prop_assert!((ds[steps - 1] - full).abs() <= 1e-12 * full);
    }
}
