use num_complex::Complex64 as C64;
use sie::cheb::Segment;
use sie::physics::{
    gravity_kernel, helmholtz_kernel, solve_scattering, Bc, Incident, ScatteringProblem,
};
use std::time::Instant;

fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

fn seg(ax: f64, ay: f64, bx: f64, by: f64) -> Segment {
    Segment::new(c(ax, ay), c(bx, by)).unwrap()
}

fn screen7() -> Vec<Segment> {
    vec![
        seg(-2.9, -2.45, -0.4, -1.8),
        seg(0.2, -2.75, 2.7, -2.15),
        seg(-2.95, -0.85, -0.85, 0.6),
        seg(0.4, -1.2, 2.85, -0.33),
        seg(-2.55, 1.35, -0.15, 2.2),
        seg(0.25, 0.75, 2.35, 2.3),
        seg(-0.95, 2.92, 1.6, 2.6),
    ]
}

fn min_pair_distance(segs: &[Segment]) -> f64 {
    let mut best = f64::INFINITY;
    for (i, a) in segs.iter().enumerate() {
        for b in segs.iter().skip(i + 1) {
            for m in 0..=40 {
                let t = -1.0 + m as f64 / 20.0;
                let p = a.map(c(t, 0.0));
                for mm in 0..=40 {
                    let tt = -1.0 + mm as f64 / 20.0;
                    let q = b.map(c(tt, 0.0));
                    best = best.min((p - q).norm());
                }
            }
        }
    }
    best
}

fn main() {
    let which = std::env::args().nth(1).unwrap_or_default();

    if which == "k20" || which.is_empty() {
        let t0 = Instant::now();
        let problem = ScatteringProblem::new(
            helmholtz_kernel(20.0).unwrap(),
            vec![seg(-1.0, 0.0, 1.0, 0.3), seg(-0.4, 1.1, 0.9, 1.6)],
            Bc::Neumann,
            Incident::PlaneWave { dir: c(1.0, -1.0) },
        );
        let sol = solve_scattering(&problem, 1e-10).unwrap();
        println!(
            "k20 neumann: dof={:?} total={} bc={:.3e} assembly={:.2}s solve={:.2}s wall={:.2}s",
            sol.per_segment_dof(),
            sol.total_dof,
            sol.bc_residual().unwrap(),
            sol.assembly_seconds,
            sol.solve_seconds,
            t0.elapsed().as_secs_f64()
        );
        // pde residual order via two stencil sizes
        let z0 = c(2.4, 2.0);
        let k = 20.0;
        let mut rs = Vec::new();
        for h in [2e-3, 1e-3] {
            let pts = [z0, z0 + c(h, 0.0), z0 - c(h, 0.0), z0 + c(0.0, h), z0 - c(0.0, h)];
            let u = sol.scattered_field(&pts).unwrap();
            let lap = (u[1] + u[2] + u[3] + u[4] - c(4.0, 0.0) * u[0]) / c(h * h, 0.0);
            rs.push((lap + c(k * k, 0.0) * u[0]).norm());
        }
        println!("k20 pde residuals: {:.3e} {:.3e} order={:.2}", rs[0], rs[1], (rs[0] / rs[1]).log2());
    }

    if which == "k100" || which.is_empty() {
        let segs = screen7();
        let total_len: f64 = segs.iter().map(|s| 2.0 * s.half_length()).sum();
        println!(
            "k100 geometry: total length={:.2} min pair distance={:.3}",
            total_len,
            min_pair_distance(&segs)
        );
        let t0 = Instant::now();
        let problem = ScatteringProblem::new(
            helmholtz_kernel(100.0).unwrap(),
            segs,
            Bc::Neumann,
            Incident::PlaneWave { dir: c(1.0, -1.0) },
        );
        let tol = 1e-10;
        let sol = solve_scattering(&problem, tol).unwrap();
        println!(
            "k100 neumann tol={tol:.0e}: dof={:?} total={} bc={:.3e} assembly={:.2}s solve={:.2}s wall={:.2}s",
            sol.per_segment_dof(),
            sol.total_dof,
            sol.bc_residual().unwrap(),
            sol.assembly_seconds,
            sol.solve_seconds,
            t0.elapsed().as_secs_f64()
        );
    }

    if which == "gravity" || which.is_empty() {
        let segs = vec![
            seg(-10.0, -3.0, -5.0, 0.0),
            seg(-2.0, 5.0, 2.0, 5.0),
            seg(5.0, 0.0, 10.0, -3.0),
        ];
        for tol in [1e-10, 1e-11, 1e-12] {
            let t0 = Instant::now();
            let problem = ScatteringProblem::new(
                gravity_kernel(20.0).unwrap(),
                segs.clone(),
                Bc::Dirichlet,
                Incident::PointSource { at: c(0.0, -5.0), strength: c(1.0, 0.0) },
            );
            let sol = solve_scattering(&problem, tol).unwrap();
            println!(
                "gravity tol={tol:.0e}: dof={:?} total={} bc={:.3e} assembly={:.2}s solve={:.2}s wall={:.2}s",
                sol.per_segment_dof(),
                sol.total_dof,
                sol.bc_residual().unwrap(),
                sol.assembly_seconds,
                sol.solve_seconds,
                t0.elapsed().as_secs_f64()
            );
        }
    }
}
