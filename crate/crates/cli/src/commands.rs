//! The six subcommands. Each writes its files through `OutputDir`, records
//! failures instead of aborting, and returns a summary for the manifest.

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use quasispec::lattice::{decompose_clusters, enumerate_indices, enumerate_slot_box, LatticeIndex};
use quasispec::multiscale::{
    build_resonant_sets, color_regions, parameter_schedule, verify_block_structure, Color, MultiscaleError,
    RegionParams,
};
use quasispec::operator::IndexProjector;
use quasispec::resonance::{measure_report, resonance_discs_level1, AngleSetLevel, ThresholdMode};
use quasispec::spectra::{eigenvalue_in_interval, g2_explicit, series_terms, step_one_split, SpectraError};
use quasispec::isocurve::{run_pipeline, PipelineConfig};

use crate::config::{Mode, Resolved, RunConfig};
use crate::output::{num, opt_num, OutputDir, RunErrorRecord};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RESONANT: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    Lattice,
    Resonance,
    Spectrum,
    Isocurve,
    Regions,
    Params,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Lattice => "lattice",
            Command::Resonance => "resonance",
            Command::Spectrum => "spectrum",
            Command::Isocurve => "isocurve",
            Command::Regions => "regions",
            Command::Params => "params",
        }
    }
}

/// Collects failures; the first one decides the exit code.
#[derive(Default)]
pub struct Errors(pub Vec<RunErrorRecord>);

impl Errors {
    pub fn push(&mut self, stage: impl Into<String>, exit_code: i32, message: impl ToString) {
        self.0.push(RunErrorRecord {
            stage: stage.into(),
            exit_code,
            message: message.to_string(),
        });
    }

    pub fn io(&mut self, r: std::io::Result<()>) {
        if let Err(e) = r {
            self.push("io", EXIT_NUMERICAL, e);
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.0.first().map_or(EXIT_OK, |e| e.exit_code)
    }
}

fn spectra_code(e: &SpectraError) -> i32 {
    if e.is_resonance() {
        EXIT_RESONANT
    } else {
        EXIT_NUMERICAL
    }
}

fn multiscale_code(e: &MultiscaleError) -> i32 {
    match e {
        MultiscaleError::Phi0Resonant { .. } => EXIT_RESONANT,
        MultiscaleError::BadParameter(_) => EXIT_CONFIG,
        MultiscaleError::Scan { source, .. } if source.is_degenerate() => EXIT_RESONANT,
        MultiscaleError::Spectra(s) => spectra_code(s),
        _ => EXIT_NUMERICAL,
    }
}

fn index_cols(m: &LatticeIndex) -> Vec<String> {
    m.as_array().iter().map(|v| v.to_string()).collect()
}

pub fn run(cmd: Command, cfg: &RunConfig, r: &Resolved, out: &mut OutputDir, errs: &mut Errors) -> Value {
    match cmd {
        Command::Lattice => lattice(cfg, r, out, errs),
        Command::Resonance => resonance(cfg, r, out, errs),
        Command::Spectrum => spectrum(cfg, r, out, errs),
        Command::Isocurve => isocurve(cfg, r, out, errs),
        Command::Regions => regions(cfg, r, out, errs),
        Command::Params => params(cfg, r, out, errs),
    }
}

fn lattice(cfg: &RunConfig, r: &Resolved, out: &mut OutputDir, errs: &mut Errors) -> Value {
    let lat = &r.lattice;
    let s = &cfg.lattice;
    let idx = out.timed("enumerate", || enumerate_indices(s.radius));
    let rows = idx.iter().map(|m| {
        let [px, py] = lat.p_xy(m);
        let mut row = index_cols(m);
        row.extend([num(px), num(py), num(lat.p_norm(m)), num(m.norm_triple())]);
        row
    });
    errs.io(out.write_csv("indices.csv", &["s1x", "s1y", "s2x", "s2y", "px", "py", "pabs", "pnorm"], rows));

    let table: Vec<_> = out.timed("best_rational", || (1..=s.q_bound_max).map(|qb| (qb, lat.best_rational(qb))).collect());
    let rows = table
        .iter()
        .map(|(qb, a)| vec![qb.to_string(), a.q.to_string(), a.p.to_string(), num(a.eps_q)]);
    errs.io(out.write_csv("best_rational.csv", &["q_bound", "q", "p", "eps_q"], rows));

    let approx = lat.best_rational(s.cluster_q_bound);
    let scale_k = s.cluster_scale.unwrap_or_else(|| {
        let k = (1.0 / (64.0 * approx.q as f64 * approx.eps_q.abs())).floor();
        k.clamp(1.0, 8.0) as u64
    });
    let pts = enumerate_slot_box(4.0 * scale_k as f64);
    let mut clusters = Value::Null;
    match out.timed("clusters", || decompose_clusters(&pts, &approx)) {
        Ok(d) => {
            let list: Vec<Value> = d
                .clusters
                .iter()
                .map(|(key, v)| json!({"s": key.s, "s2pp": key.s2pp, "size": v.len()}))
                .collect();
            clusters = json!({
                "approx": d.approx,
                "index_scale": scale_k,
                "indices": pts.len(),
                "step": d.step,
                "scale": d.scale,
                "scale_condition_holds": d.scale_condition_holds,
                "max_diameter": d.max_diameter,
                "diameter_bound": d.diameter_bound(),
                "min_separation": d.min_separation,
                "separation_bound": d.separation_bound(),
                "cluster_count": d.clusters.len(),
                "clusters": list,
            });
            errs.io(out.write_json("clusters.json", &clusters));
            clusters.as_object_mut().map(|o| o.remove("clusters"));
        }
        Err(e) => errs.push("clusters", EXIT_NUMERICAL, e),
    }
    json!({"indices": idx.len(), "q_bounds": table.len(), "clusters": clusters})
}

fn write_set(out: &mut OutputDir, prefix: &str, set: &AngleSetLevel) -> std::io::Result<()> {
    let discs: Vec<Value> = set
        .discs
        .iter()
        .map(|d| {
            json!({
                "level": d.level,
                "center_re": d.center.re,
                "center_im": d.center.im,
                "radius": d.radius,
                "source": d.source.to_string(),
            })
        })
        .collect();
    out.write_json(&format!("{prefix}discs.json"), &discs)?;
    let rows = set
        .real_arcs
        .arcs()
        .iter()
        .map(|(a, b)| vec![set.level.to_string(), num(*a), num(*b)]);
    out.write_csv(&format!("{prefix}arcs.csv"), &["level", "arc_start", "arc_end"], rows)
}

fn resonance(cfg: &RunConfig, r: &Resolved, out: &mut OutputDir, errs: &mut Errors) -> Value {
    let lat = &r.lattice;
    let k = cfg.k();
    let mode = cfg.threshold_mode();
    let s = &cfg.resonance;
    let set = out.timed("level1", || resonance_discs_level1(lat, k, &mode, s.range));
    errs.io(write_set(out, "", &set));
    let report = measure_report(&set, s.measure_c, lat.mu, cfg.delta);

    // independent membership test on random angles
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut outside = 0usize;
    let mut mismatches = 0usize;
    for _ in 0..s.monte_carlo {
        let phi = rng.gen::<f64>() * TAU;
        let hit = set.discs.iter().any(|d| d.contains(Complex64::new(phi, 0.0)));
        if !hit {
            outside += 1;
        }
        if hit == set.real_arcs.contains(phi) {
            mismatches += 1;
        }
    }
    let mc = (s.monte_carlo > 0).then(|| {
        let frac = outside as f64 / s.monte_carlo as f64;
        json!({
            "samples": s.monte_carlo,
            "seed": cfg.seed,
            "measure_estimate": TAU * frac,
            "std_error": TAU * (frac * (1.0 - frac) / s.monte_carlo as f64).sqrt(),
            "membership_mismatches": mismatches,
        })
    });
    let summary = json!({
        "k": k,
        "tau": set.tau,
        "range": s.range,
        "discs": set.discs.len(),
        "arcs": set.real_arcs.arcs().len(),
        "measure": report,
        "monte_carlo": mc,
    });
    errs.io(out.write_json("resonance.json", &summary));
    summary
}

fn spectrum(cfg: &RunConfig, r: &Resolved, out: &mut OutputDir, errs: &mut Errors) -> Value {
    let (lat, pot) = (&r.lattice, &r.potential);
    let k = cfg.k();
    let l = cfg.l;
    let s = &cfg.spectrum;
    let kappa = [k * s.phi.cos(), k * s.phi.sin()];
    let proj = IndexProjector::ball("P", s.radius);
    let center = k.powi(2 * l as i32);
    let half = cfg
        .half_width
        .unwrap_or_else(|| cfg.threshold_mode().level1_half_width(lat.mu, k, l));
    let contour = 0.5 * half;
    let mut summary = json!({
        "k": k, "phi": s.phi, "kappa": kappa, "l": l, "dim": proj.len(),
        "center": center, "half_width": half, "contour_radius": contour,
    });
    let (h, op, w) = match step_one_split(lat, pot, kappa, l, &proj) {
        Ok(x) => x,
        Err(e) => {
            errs.push("fiber", spectra_code(&e), e);
            return summary;
        }
    };
    let series = out.timed("series", || series_terms(&op, &w, center, contour, s.r_max));
    let pair = out.timed("eigensolve", || eigenvalue_in_interval(&h, center, half, 1));
    let o = summary.as_object_mut().expect("object");
    match &series {
        Ok(rep) => {
            o.insert("series".into(), json!(rep));
            o.insert("series_eigenvalue".into(), json!(rep.eigenvalue()));
        }
        Err(e) => errs.push("series", spectra_code(e), e),
    }
    match &pair {
        Ok(p) => {
            o.insert("eigenvalue".into(), json!(p.lambda));
            o.insert("residual".into(), json!(p.residual));
            if let Ok(Some(sv)) = series.as_ref().map(|rep| rep.eigenvalue()) {
                let diff = (sv - p.lambda).abs();
                let tail = series.as_ref().map(|rep| rep.tail_bound).unwrap_or(f64::INFINITY);
                o.insert("difference".into(), json!(diff));
                o.insert("within_tail_bound".into(), json!(diff <= tail));
            }
            let rows = proj.members().iter().enumerate().map(|(i, m)| {
                let c = p.vector[i];
                let mut row = index_cols(m);
                row.extend([num(c.re), num(c.im), num(c.norm())]);
                row
            });
            errs.io(out.write_csv("eigenvector.csv", &["s1x", "s1y", "s2x", "s2y", "re", "im", "abs"], rows));
        }
        Err(e) => errs.push("eigensolve", spectra_code(e), e),
    }
    o.insert("g2".into(), json!(g2_explicit(lat, pot, kappa, l, &proj).ok()));
    errs.io(out.write_json("spectrum.json", &summary));
    summary
}

fn isocurve(cfg: &RunConfig, r: &Resolved, out: &mut OutputDir, errs: &mut Errors) -> Value {
    let (lat, pot) = (&r.lattice, &r.potential);
    let pc = PipelineConfig {
        lambda: cfg.lambda(),
        l: cfg.l,
        mode: cfg.threshold_mode(),
        radii: cfg.radii.clone(),
        pole_radii: cfg.pole_radii.clone(),
        window_half_width: cfg.window_half_width,
        samples_per_arc: cfg.samples_per_arc,
        half_width: cfg.half_width,
    };
    let res = out.timed("pipeline", || run_pipeline(lat, pot, &pc));
    let mut levels = Vec::new();
    for lv in &res.levels {
        let n = lv.set.level;
        let prefix = format!("level{n}_");
        errs.io(write_set(out, &prefix, &lv.set));
        let rows = lv.curve.points.iter().map(|p| {
            let [x, y] = p.xy();
            vec![
                num(p.phi),
                num(p.kappa),
                num(x),
                num(y),
                num(p.closure_residual),
                opt_num(p.dkappa_dphi),
            ]
        });
        errs.io(out.write_csv(
            &format!("{prefix}curve.csv"),
            &["phi", "kappa", "x", "y", "closure_residual", "dkappa_dphi"],
            rows,
        ));
        if let Some(d) = &lv.diff {
            let rows = d.rows.iter().map(|(phi, h, dh)| vec![num(*phi), num(*h), opt_num(*dh)]);
            errs.io(out.write_csv(&format!("{prefix}diff.csv"), &["phi", "h", "dh_dphi"], rows));
        }
        levels.push(json!({
            "level": n,
            "arcs": lv.set.real_arcs.arcs().len(),
            "measure": lv.set.real_arcs.measure(),
            "discs": lv.set.discs.len(),
            "points": lv.curve.points.len(),
            "failures": lv.curve.failures.len(),
            "scanned_blocks": lv.scanned_blocks,
            "max_abs_h": lv.diff.as_ref().map(|d| d.max_abs),
            "mean_abs_h": lv.diff.as_ref().map(|d| d.mean_abs),
        }));
    }
    if let Some(f) = &res.error {
        let code = if f.degenerate { EXIT_RESONANT } else { EXIT_NUMERICAL };
        errs.push(format!("level {}", f.level), code, &f.message);
    }
    json!({"k": res.k, "lambda": pc.lambda, "requested_levels": pc.radii.len(), "levels": levels})
}

fn regions(cfg: &RunConfig, r: &Resolved, out: &mut OutputDir, errs: &mut Errors) -> Value {
    let (lat, pot) = (&r.lattice, &r.potential);
    let s = &cfg.regions;
    let k = s.k;
    let mut p = RegionParams::derived(k, s.r1, s.r2, s.gamma, cfg.delta, s.simple_threshold);
    if let Some(b) = s.box_size {
        p.box_size = b;
    }
    if let Some(b) = s.small_box {
        p.small_box = b;
    }
    let mut summary = json!({"k": k, "phi0": s.phi0, "params": p});
    if let Err(e) = p.validate() {
        errs.push("params", multiscale_code(&e), e);
        return summary;
    }
    let mode = match cfg.mode {
        Mode::Desk => ThresholdMode::Desk { t_res: s.t_res },
        Mode::Paper => cfg.threshold_mode(),
    };
    let sets = match out.timed("resonant_sets", || build_resonant_sets(lat, s.phi0, k, s.r2, cfg.delta, &mode)) {
        Ok(x) => x,
        Err(e) => {
            errs.push("resonant_sets", multiscale_code(&e), e);
            return summary;
        }
    };
    let coloring = match out.timed("coloring", || color_regions(lat, &sets.m2, &sets.m, &p)) {
        Ok(c) => c,
        Err(e) => {
            errs.push("coloring", multiscale_code(&e), e);
            return summary;
        }
    };
    let mut comp_of: BTreeMap<LatticeIndex, usize> = BTreeMap::new();
    for ((_, j), v) in &coloring.components {
        for m in v {
            comp_of.insert(*m, *j);
        }
    }
    let rows = coloring.assignment.iter().map(|(m, c)| {
        let mut row = index_cols(m);
        row.push(c.name().to_string());
        row.push(comp_of.get(m).map(|j| j.to_string()).unwrap_or_default());
        row
    });
    errs.io(out.write_csv("regions.csv", &["s1x", "s1y", "s2x", "s2y", "color", "component_id"], rows));

    let mut counts = BTreeMap::new();
    let mut points = BTreeMap::new();
    for c in Color::ALL {
        counts.insert(c.name(), coloring.component_count(c));
        points.insert(c.name(), coloring.indices_of(c).len());
    }
    let resonant = json!({
        "m": sets.m.len(),
        "m_prime": sets.m_prime.len(),
        "m1": sets.m1.len(),
        "m2": sets.m2.len(),
        "classes": sets.classes.len(),
        "max_class_size": sets.max_class_size(),
        "oversized": sets.oversized,
    });
    let components = json!({
        "k": k,
        "phi0": sets.phi0,
        "params": p,
        "merge_passes": coloring.merge_passes,
        "simple_isolation_violations": coloring.simple_isolation_violations,
        "component_counts": counts,
        "point_counts": points,
        "resonant": resonant,
        "components": coloring.reports,
    });
    errs.io(out.write_json("components.json", &components));

    let kappa = [k * sets.phi0.cos(), k * sets.phi0.sin()];
    let blocks = coloring.block_projectors();
    let check = out.timed("block_structure", || {
        verify_block_structure(lat, pot, kappa, cfg.l, &blocks, Some(pot.q_radius()))
    });
    let block_json = match &check {
        Ok(rep) => json!({"ok": true, "report": rep}),
        Err(e) => json!({"ok": false, "error": e.to_string()}),
    };
    errs.io(out.write_json("block_report.json", &block_json));
    if let Err(e) = check {
        errs.push("block_structure", EXIT_NUMERICAL, e);
    }
    let o = summary.as_object_mut().expect("object");
    o.insert("component_counts".into(), components["component_counts"].clone());
    o.insert("resonant".into(), resonant);
    o.insert("block_structure_ok".into(), block_json["ok"].clone());
    summary
}

fn params(cfg: &RunConfig, r: &Resolved, out: &mut OutputDir, errs: &mut Errors) -> Value {
    let s = &cfg.schedule;
    let q = s.q.unwrap_or_else(|| r.potential.q_radius());
    let res = parameter_schedule(
        cfg.k(),
        cfg.delta,
        cfg.mu,
        cfg.l,
        q,
        s.n_levels,
        s.r1,
        s.gamma,
        cfg.mode == Mode::Paper,
    );
    match res {
        Ok(sched) => {
            errs.io(out.write_json("schedule.json", &sched));
            json!({"all_hold": sched.all_hold(), "warnings": sched.warnings, "levels": sched.levels.len()})
        }
        Err(e) => {
            errs.push("schedule", multiscale_code(&e), e);
            Value::Null
        }
    }
}
