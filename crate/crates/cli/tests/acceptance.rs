//! Acceptance gate: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Benchmarks come from the shipped `configs/`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use ebsde_cli::config::{load, ExperimentConfig};
use ebsde_cli::{execute, shipped_configs, Outcome, Subcommand};
use ebsde_core::bsde::Driver;
use ebsde_core::discounted::solve_discounted;
use ebsde_core::ergodicity::{coupling_decay, fit_log_gaps, hitting_times, BoundedFn};
use ebsde_core::powerplant::{gaussian_positive_part, plant_value, RateFn};
use serde_json::Value;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().expect("workspace root")
}

fn config_path(name: &str) -> PathBuf {
    root().join("configs").join(format!("{name}.toml"))
}

fn cfg(name: &str, overrides: &[&str]) -> ExperimentConfig {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    load(&config_path(name), &o, None).unwrap_or_else(|e| panic!("{name}: {e}")).config
}

fn single_worker<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(1).build().expect("pool").install(f)
}

fn num(v: &Value, path: &str) -> f64 {
    let mut cur = v;
    for p in path.split('.') {
        cur = match p.parse::<usize>() {
            Ok(i) => &cur[i],
            Err(_) => &cur[p],
        };
    }
    cur.as_f64().unwrap_or_else(|| panic!("{path} is not a number in {v}"))
}

fn results(o: &Outcome) -> Value {
    Value::Object(o.results.clone())
}

type Check = Result<String, String>;

fn ensure(ok: bool, msg: String) -> Check {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

/// Each shipped config that carries an `[ebsde]` section, with the
/// subcommand that solves it.
fn ebsde_runs() -> Vec<(String, Subcommand)> {
    shipped_configs(&root())
        .expect("configs dir")
        .iter()
        .filter_map(|p| {
            let name = p.file_stem()?.to_str()?.to_string();
            let c = cfg(&name, &[]);
            c.ebsde.as_ref()?;
            let sub = if c.control.is_some() {
                Subcommand::Control
            } else if c.powerplant.is_some() {
                Subcommand::Powerplant
            } else {
                Subcommand::Ebsde
            };
            Some((name, sub))
        })
        .collect()
}

struct Solved {
    outcomes: BTreeMap<String, (Value, Vec<String>, Duration)>,
}

impl Solved {
    fn run_all() -> Self {
        let mut outcomes = BTreeMap::new();
        for (name, sub) in ebsde_runs() {
            let t = Instant::now();
            let o = execute(sub, &cfg(&name, &[])).unwrap_or_else(|e| panic!("{sub} {name}: {e}"));
            eprintln!("  solved {name} ({sub}) in {:.1} s", t.elapsed().as_secs_f64());
            outcomes.insert(name, (results(&o), o.failures, t.elapsed()));
        }
        Self { outcomes }
    }

    fn get(&self, name: &str) -> &(Value, Vec<String>, Duration) {
        self.outcomes.get(name).unwrap_or_else(|| panic!("{name} was not solved"))
    }
}

fn c1_ou_variance() -> Check {
    let c = cfg("ou_stationary", &[]);
    let s = &c.simulation;
    if s.t_end != 10.0 || s.dt != 1e-3 || s.n_paths != 10_000 {
        return Err("ou_stationary no longer matches t = 10, dt = 1e-3, 10^4 paths".into());
    }
    let t = Instant::now();
    let o = single_worker(|| execute(Subcommand::Simulate, &c)).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    let r = results(&o);
    let (m, se) = (num(&r, "stationary_variance.0.mean"), num(&r, "stationary_variance.0.stderr"));
    ensure(
        (m - 0.5).abs() <= 3.0 * se && secs < 30.0,
        format!("Var X_10 = {m:.4} +- {se:.4} vs 0.5 (3 se), {secs:.1} s on one worker (limit 30 s)"),
    )
}

fn c2_moment_bounds() -> Check {
    let mut bad = Vec::new();
    let mut n = 0;
    for p in shipped_configs(&root()).map_err(|e| e.to_string())? {
        let name = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let o = execute(Subcommand::Simulate, &cfg(&name, &[])).map_err(|e| format!("{name}: {e}"))?;
        let v = results(&o)["moment_bound"]["violations"].as_array().map(|a| a.len()).unwrap_or(usize::MAX);
        n += 1;
        if v > 0 {
            bad.push(format!("{name}: {v}"));
        }
    }
    ensure(bad.is_empty() && n > 0, format!("second-moment bound held on {n} shipped configs; violations {bad:?}"))
}

fn c3_coupling() -> Check {
    let c = cfg("ou_stationary", &[]);
    let cp = c.ergodicity.as_ref().and_then(|e| e.coupling.as_ref()).ok_or("no coupling section")?;
    let coeffs = c.coefficients().map_err(|e| e.to_string())?;
    let noise = c.noise().map_err(|e| e.to_string())?;
    let t = Instant::now();
    let fit = coupling_decay(
        &coeffs,
        &noise,
        &cp.x,
        &cp.y,
        &[BoundedFn::sin(0)],
        cp.horizon,
        c.simulation.dt,
        c.simulation.n_paths,
        c.seed,
        cp.record_every,
    )
    .map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    let (rho, _) = fit.rate().map_err(|e| e.to_string())?;
    // E sin(X_t) = sin(m_t) exp(-v_t / 2) for the Gaussian OU marginal.
    let exact: Vec<f64> = fit
        .times
        .iter()
        .map(|&t| {
            let v = 0.5 * (1.0 - (-2.0 * t).exp());
            let g = |x0: f64| (x0 * (-t).exp()).sin() * (-0.5 * v).exp();
            (g(cp.x[0]) - g(cp.y[0])).abs()
        })
        .collect();
    let oracle = fit_log_gaps(&fit.times, &exact, &fit.gap_stderr[0]).ok_or("oracle fit degenerate")?;
    let rel = (rho - oracle.rho).abs() / oracle.rho;
    ensure(
        rel <= 0.2 && fit.r_squared > 0.95 && secs < 120.0,
        format!(
            "rho = {rho:.4} vs oracle {:.4} ({:.1}% off, limit 20%), R^2 = {:.4}, {secs:.1} s",
            oracle.rho,
            100.0 * rel,
            fit.r_squared
        ),
    )
}

fn c4_hitting() -> Check {
    let c = cfg("ou_stationary", &[]);
    let h = c.ergodicity.as_ref().and_then(|e| e.hitting.as_ref()).ok_or("no hitting section")?;
    if h.x != [3.0] || h.radius != 0.5 || h.horizon != 10.0 {
        return Err("ou_stationary hitting no longer starts at 3 for B(0, 0.5) with T = 10".into());
    }
    let coeffs = c.coefficients().map_err(|e| e.to_string())?;
    let noise = c.noise().map_err(|e| e.to_string())?;
    let st = hitting_times(&coeffs, &noise, &h.x, &h.center, h.radius, h.horizon, c.simulation.dt, c.simulation.n_paths, c.seed)
        .map_err(|e| e.to_string())?;
    let s = st.survival_at(h.horizon);
    ensure(s < 0.05, format!("P(tau > 10) = {s:.4} over {} paths (limit 0.05)", st.samples.len()))
}

fn c5_discounted_bounds() -> Check {
    let c = cfg("periodic_jumps", &[]);
    let coeffs = c.coefficients().map_err(|e| e.to_string())?;
    let noise = c.noise().map_err(|e| e.to_string())?;
    let num_ = c.numerics();
    let few = ebsde_core::discounted::Numerics { n_paths: 50, ..num_ };
    let k = 0.7;
    let mut worst: f64 = 0.0;
    for alpha in [0.4, 0.2, 0.1, 0.05] {
        let r = solve_discounted(&Driver::constant(k), &coeffs, &noise, alpha, 0.0, &c.simulation.x0, 1e-7, &few)
            .map_err(|e| e.to_string())?;
        worst = worst.max((r.value.mean - k / alpha).abs() / (k / alpha));
    }
    let driver = c.driver().map_err(|e| e.to_string())?;
    let mut fails = Vec::new();
    for alpha in [0.4, 0.2, 0.1, 0.05] {
        let r = solve_discounted(&driver, &coeffs, &noise, alpha, 0.0, &c.simulation.x0, 0.01, &num_).map_err(|e| e.to_string())?;
        if r.bound_check.violated || r.zero_bound.violations > 0 {
            fails.push(alpha);
        }
    }
    ensure(
        worst <= 1e-6 && fails.is_empty(),
        format!("f = c gives c/alpha to {worst:.1e} relative (limit 1e-6); bounded driver violations at alpha {fails:?}"),
    )
}

fn c6_horizon_gaps() -> Check {
    let mut msgs = Vec::new();
    let mut ok = true;
    for name in ["periodic_jumps", "ou_linear"] {
        let o = execute(Subcommand::Discounted, &cfg(name, &[])).map_err(|e| e.to_string())?;
        let r = results(&o);
        let rows = r["horizon_study"].as_array().ok_or("no horizon study")?;
        let over = rows
            .iter()
            .filter(|row| num(row, "gap") > num(row, "bound") + 3.0 * num(row, "gap_stderr"))
            .count();
        ok &= over == 0 && rows.len() >= 3;
        msgs.push(format!("{name}: {over}/{} horizons above bound + 3 se", rows.len()));
    }
    ensure(ok, msgs.join("; "))
}

fn c7_ou_ebsde(solved: &Solved) -> Check {
    let (q, _, tq) = solved.get("ou_quadratic");
    let (l, _, tl) = solved.get("ou_linear");
    let secs = (*tq + *tl).as_secs_f64();
    let lq = num(q, "lambda_hat");
    let (ll, sl) = (num(l, "lambda_hat"), num(l, "lambda_stderr"));
    let probes = l["ebsde"]["probe_points"].as_array().ok_or("no probes")?;
    let vs = l["ebsde"]["v_probes"].as_array().ok_or("no v estimates")?;
    let (mut num2, mut den2) = (0.0, 0.0);
    for (p, v) in probes.iter().zip(vs) {
        // theta = 1, base point at the origin: v(x) = x.
        let x = num(p, "x.0");
        let e = num(v, "mean") - x;
        num2 += e * e;
        den2 += x * x;
    }
    let rms = (num2 / den2).sqrt();
    ensure(
        (lq - 0.5).abs() <= 0.015 && ll.abs() <= 2.0 * sl && rms <= 0.03 && !probes.is_empty() && secs < 600.0,
        format!(
            "f = x^2: lambda = {lq:.4} (0.5 +- 3%); f = x: lambda = {ll:.4} +- {sl:.4}, v relative RMS {:.2}% over {} probes (limit 3%); {secs:.0} s",
            100.0 * rms,
            probes.len()
        ),
    )
}

fn c8_invariant(solved: &Solved) -> Check {
    let mut msgs = Vec::new();
    let mut ok = !solved.outcomes.is_empty();
    for (name, (r, _, _)) in &solved.outcomes {
        let inv = &r["lambda_invariant"];
        if inv.is_null() {
            ok = false;
            msgs.push(format!("{name}: no invariant check"));
            continue;
        }
        let (gap, se) = (num(inv, "gap"), num(inv, "combined_stderr"));
        ok &= gap <= 2.0 * se;
        msgs.push(format!("{name} {:.2} se", gap / se));
    }
    ensure(ok, format!("|lambda_hat - int f dmu| within 2 se: {}", msgs.join(", ")))
}

fn c9_pide() -> Check {
    let o = execute(Subcommand::Bsde, &cfg("bsde_jumps", &[])).map_err(|e| e.to_string())?;
    let r = results(&o);
    let rms = num(&r, "pide.relative_rms");
    let bad = r["residual_failures"].as_array().map(|a| a.len()).unwrap_or(usize::MAX);
    ensure(
        rms <= 0.02 && bad == 0,
        format!("regression vs PIDE relative RMS {:.2}% (limit 2%), {bad} residual steps beyond 4 se", 100.0 * rms),
    )
}

fn c10_control(solved: &Solved) -> Check {
    let (r, _, _) = solved.get("control_two_shift");
    let ev = &r["evaluation"];
    let (lam, lse) = (num(ev, "lambda.mean"), num(ev, "lambda.stderr"));
    let (j, jse) = (num(ev, "feedback.j_hat"), num(ev, "feedback.stderr"));
    let mut ok = (j - lam).abs() <= 2.0 * lse.hypot(jse);
    let mut consts = Vec::new();
    for c in ev["constant"].as_array().ok_or("no constant-control runs")? {
        let (jc, sc) = (num(c, "evaluation.j_hat"), num(c, "evaluation.stderr"));
        ok &= lam <= jc + 2.0 * lse.hypot(sc);
        consts.push(format!("{jc:.4}"));
    }
    ok &= !consts.is_empty();
    ensure(
        ok,
        format!("lambda = {lam:.4} +- {lse:.4}, J(policy) = {j:.4} +- {jse:.4}, constant controls J = [{}]", consts.join(", ")),
    )
}

fn c11_powerplant(solved: &Solved) -> Check {
    let (g, _, _) = solved.get("powerplant_gaussian");
    let c = cfg("powerplant_gaussian", &[]);
    let p = c.powerplant.as_ref().ok_or("no powerplant section")?;
    let (theta, kappa) = (p.theta.mean, p.kappa.mean);
    let exact = gaussian_positive_part(kappa, p.vol / (2.0 * theta).sqrt());
    let lam = num(g, "lambda_hat");
    let rel = (lam - exact).abs() / exact;
    let pv = plant_value(1.0, &RateFn::Constant(0.05), 20.0).map_err(|e| e.to_string())?;
    let pv_exact = (1.0 - (-1.0f64).exp()) / 0.05;
    let (s, fails, _) = solved.get("powerplant_seasonal");
    let nested = s["valuation"]["nested_lambda"].as_array().ok_or("no nested study")?;
    let means: Vec<f64> = nested.iter().map(|e| num(e, "mean")).collect();
    let mono = nested.len() == 3 && !fails.iter().any(|f| f.contains("raised"));
    ensure(
        rel <= 0.05 && (pv - pv_exact).abs() <= 1e-6 && mono,
        format!(
            "Gaussian lambda = {lam:.4} vs {exact:.4} ({:.1}%, limit 5%); value {pv:.6} vs {pv_exact:.6}; nested lambda {means:.4?}",
            100.0 * rel
        ),
    )
}

fn manifest_without_runtime(dir: &Path) -> Result<Value, String> {
    let text = std::fs::read_to_string(dir.join("manifest.json")).map_err(|e| e.to_string())?;
    let mut v: Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    v.as_object_mut().ok_or("manifest is not an object")?.remove("runtime");
    Ok(v)
}

fn c12_determinism() -> Check {
    let bin = env!("CARGO_BIN_EXE_ebsde-lab");
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let small = |extra: &[&'static str]| {
        let mut v = vec!["simulation.n_paths=200"];
        v.extend_from_slice(extra);
        v
    };
    let cases: Vec<(&str, &str, Vec<&str>)> = vec![
        ("simulate", "ou_stationary", small(&["simulation.t_end=1.0"])),
        ("ergodicity", "periodic_jumps", small(&["ergodicity.invariant.horizon=110.0"])),
        ("bsde", "bsde_jumps", small(&["bsde.pide.n_steps=200", "bsde.pide.n_x=61"])),
        ("discounted", "periodic_jumps", small(&[])),
        ("ebsde", "periodic_jumps", small(&["ebsde.levels=2", "ebsde.invariant_check.horizon=110.0"])),
        (
            "control",
            "control_two_shift",
            small(&["ebsde.levels=2", "control.evaluation.n_paths=40", "control.evaluation.horizon=25.0", "ebsde.invariant_check.horizon=110.0"]),
        ),
        ("powerplant", "powerplant_seasonal", small(&["ebsde.levels=2", "ebsde.invariant_check.horizon=110.0"])),
    ];
    let mut diffs = Vec::new();
    for (sub, name, ov) in &cases {
        let mut dirs = Vec::new();
        let mut codes = Vec::new();
        for workers in [1, 3] {
            let dir = tmp.path().join(format!("{sub}-{workers}"));
            let mut cmd = Command::new(bin);
            cmd.arg(sub).arg("--config").arg(config_path(name)).arg("--workers").arg(workers.to_string());
            cmd.arg("--out-dir").arg(&dir).arg("--seed").arg("424242");
            for o in ov {
                cmd.arg("--override").arg(o);
            }
            let out = cmd.output().map_err(|e| e.to_string())?;
            codes.push(out.status.code());
            if !matches!(out.status.code(), Some(0) | Some(2)) {
                return Err(format!("{sub} {name} failed: {}", String::from_utf8_lossy(&out.stderr)));
            }
            dirs.push(dir);
        }
        let files = |d: &Path| -> Vec<String> {
            let mut v: Vec<String> = std::fs::read_dir(d)
                .map(|r| r.filter_map(|e| e.ok()?.file_name().into_string().ok()).collect())
                .unwrap_or_default();
            v.sort();
            v
        };
        let (fa, fb) = (files(&dirs[0]), files(&dirs[1]));
        if fa != fb || codes[0] != codes[1] {
            diffs.push(format!("{sub}: file sets or exit codes differ"));
            continue;
        }
        for f in fa.iter().filter(|f| *f != "manifest.json") {
            if std::fs::read(dirs[0].join(f)).ok() != std::fs::read(dirs[1].join(f)).ok() {
                diffs.push(format!("{sub}/{f}"));
            }
        }
        if manifest_without_runtime(&dirs[0])? != manifest_without_runtime(&dirs[1])? {
            diffs.push(format!("{sub}/manifest.json"));
        }
    }
    ensure(
        diffs.is_empty(),
        format!("{} subcommands byte-identical across 1 and 3 workers; differences {diffs:?}", cases.len()),
    )
}

fn main() {
    let started = Instant::now();
    let mut failed = 0;
    let mut report = |id: u32, title: &str, r: Check| {
        let (tag, msg) = match r {
            Ok(m) => ("PASS", m),
            Err(m) => {
                failed += 1;
                ("FAIL", m)
            }
        };
        println!("{tag} [{id:>2}] {title}: {msg}");
    };
    report(1, "OU stationary variance", c1_ou_variance());
    report(2, "moment bound on shipped configs", c2_moment_bounds());
    report(3, "coupling decay rate", c3_coupling());
    report(4, "hitting-time tail", c4_hitting());
    report(5, "discounted a-priori bounds", c5_discounted_bounds());
    report(6, "horizon convergence", c6_horizon_gaps());
    let solved = Solved::run_all();
    report(7, "OU ergodic BSDE", c7_ou_ebsde(&solved));
    report(8, "invariant-measure cross-check", c8_invariant(&solved));
    report(9, "BSDE vs PIDE", c9_pide());
    report(10, "ergodic control", c10_control(&solved));
    report(11, "power plant", c11_powerplant(&solved));
    report(12, "CLI determinism", c12_determinism());
    println!("acceptance: {} failed, {:.0} s", failed, started.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
