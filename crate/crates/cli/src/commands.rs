use crate::error::CliError;
use crate::format::{num, Format, Report};
use crate::{Alternative, CalibrateArgs, FitArgs, Inputs, SimulateArgs, TestArgs, Tolerances};
use lvm_infer_core::correction::CorrectedFit;
use lvm_infer_core::inference::{parse_contrasts, prepare, InferenceContext, Prepared};
use lvm_infer_core::model_spec::Role;
use lvm_infer_core::simulation::{
    builtin_study, calibrate_type1, default_generative_values, replicate_rng, simulate as draw, CalibrationReport,
    Covariate, Hypothesis, SimulationError, StudyConfig,
};
use lvm_infer_core::{
    fit as fit_model, index_parameters, parse_model, validate, ClusterIndex, Correction, CorrectionOptions, Dataset,
    FitOptions, FitResult, Frame, ModelSpec, ParameterTable,
};
use nalgebra::{DMatrix, DVector};
use std::io::Write;
use std::path::Path;

fn version_line() -> String {
    format!("# lvm-infer {}\n", env!("CARGO_PKG_VERSION"))
}

fn read_model(path: &Path) -> Result<ModelSpec, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    parse_model(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn emit(text: &str, path: Option<&Path>, out: &mut dyn Write) -> Result<(), CliError> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::Io(format!("{}: {e}", p.display()))),
        None => out.write_all(text.as_bytes()).map_err(|e| CliError::Io(e.to_string())),
    }
}

fn fit_options(t: &Tolerances) -> FitOptions {
    let d = FitOptions::default();
    FitOptions {
        max_iter: t.max_iter.unwrap_or(d.max_iter),
        tol_loglik: t.tol_loglik.unwrap_or(d.tol_loglik),
        tol_score: t.tol_score.unwrap_or(d.tol_score),
        ..d
    }
}

fn correction_options(t: &Tolerances) -> CorrectionOptions {
    let d = CorrectionOptions::default();
    CorrectionOptions {
        max_iter: t.correction_max_iter.unwrap_or(d.max_iter),
        tol_frob: t.tol_frob.unwrap_or(d.tol_frob),
        acceleration: t.acceleration.unwrap_or(d.acceleration),
    }
}

struct Fitted {
    fit: FitResult,
    clusters: Option<(String, ClusterIndex)>,
}

fn load_and_fit(inputs: &Inputs, tol: &Tolerances) -> Result<Fitted, CliError> {
    let spec = read_model(&inputs.model)?;
    let frame = Frame::from_path(&inputs.data).map_err(|e| CliError::Io(format!("{}: {e}", inputs.data.display())))?;
    if let Err(errs) = validate(&spec, &frame.header) {
        let msgs: Vec<String> = errs.iter().map(ToString::to_string).collect();
        return Err(CliError::Usage(msgs.join("; ")));
    }
    let table = index_parameters(&spec);
    let data = Dataset::from_frame(&frame, &table)?;
    let clusters = match &inputs.robust_cluster {
        Some(col) => Some((col.clone(), ClusterIndex::new(&frame.text_column(col)?))),
        None => None,
    };
    let fit = fit_model(&table, &data, &fit_options(tol))?;
    if !fit.converged() {
        return Err(CliError::Numerical(format!(
            "{}: fit stopped after {} iterations (max |score| {})",
            fit.status,
            fit.iterations,
            num(fit.max_abs_score)
        )));
    }
    Ok(Fitted { fit, clusters })
}

fn prepared<'a>(fit: &'a FitResult, inputs: &Inputs, tol: &Tolerances) -> Result<Prepared<'a>, CliError> {
    let p = prepare(fit, inputs.correction, &correction_options(tol))?;
    if let Some(c) = p.corrected() {
        if !c.converged {
            return Err(CliError::Numerical(format!(
                "correction-not-converged: {} iterations, last change {}",
                c.iterations,
                c.trace.last().map_or("n/a".into(), |r| num(r.omega_change))
            )));
        }
    }
    Ok(p)
}

fn header_lines(f: &Fitted, correction: Correction, corrected: Option<&CorrectedFit>) -> String {
    let fit = &f.fit;
    let mut s = version_line();
    s += &format!(
        "# n = {}, parameters = {}, log-likelihood = {}, iterations = {}, status = {}\n",
        fit.data.n(),
        fit.table.p(),
        num(fit.loglik),
        fit.iterations,
        fit.status
    );
    s += &format!("# correction = {correction}");
    if let Some(c) = corrected {
        s += &format!(" (algorithm {}, {} iterations)", c.algorithm, c.iterations);
        if correction == Correction::FullWithNeff {
            let neff: Vec<String> = fit
                .table
                .endogenous
                .iter()
                .zip(c.n_eff.iter())
                .map(|(name, v)| format!("{name} = {}", num(*v)))
                .collect();
            s += &format!(", effective sample size: {}", neff.join(", "));
        }
    }
    s.push('\n');
    if let Some((col, idx)) = &f.clusters {
        s += &format!("# robust standard errors: {} clusters from column `{col}`\n", idx.g);
    }
    s
}

fn role_name(r: Role) -> &'static str {
    match r {
        Role::Mean => "mean",
        Role::Variance => "variance",
        Role::Both => "both",
    }
}

pub fn fit(a: &FitArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let f = load_and_fit(&a.inputs, &a.tolerances)?;
    let prep = prepared(&f.fit, &a.inputs, &a.tolerances)?;
    let ctx = InferenceContext::new(prep.source(), a.inputs.correction, f.clusters.as_ref().map(|c| &c.1))?;
    let table = &f.fit.table;
    let theta = prep.source().theta();
    let mut rep = Report::new(&[
        ("parameter", false),
        ("role", false),
        ("estimate", true),
        ("se", true),
        ("df", true),
        ("statistic", true),
        ("p_value", true),
    ]);
    for (k, par) in table.params.iter().enumerate() {
        let mut c = DVector::zeros(table.p());
        c[k] = 1.0;
        let cells = match ctx.wald(&c, 0.0) {
            Ok(w) => [w.se, w.df, w.statistic, w.p_value].map(num),
            Err(_) => [f64::NAN; 4].map(num),
        };
        let mut row = vec![par.label.clone(), role_name(par.role).into(), num(theta[k])];
        row.extend(cells);
        rep.push(row);
    }
    let text = match a.output.format {
        Format::Table => header_lines(&f, a.inputs.correction, prep.corrected()) + &rep.render(Format::Table),
        Format::Csv => rep.render(Format::Csv),
    };
    emit(&text, a.output.out.as_deref(), out)
}

pub fn test(a: &TestArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let f = load_and_fit(&a.inputs, &a.tolerances)?;
    let table = &f.fit.table;
    let parsed: Vec<(DMatrix<f64>, DVector<f64>)> =
        a.contrast.iter().map(|e| parse_contrasts(table, e)).collect::<Result<_, _>>()?;
    if a.alternative != Alternative::TwoSided && parsed.iter().any(|(c, _)| c.nrows() > 1) {
        return Err(CliError::Usage("one-sided alternatives need single-equation contrasts".into()));
    }
    let prep = prepared(&f.fit, &a.inputs, &a.tolerances)?;
    let ctx = InferenceContext::new(prep.source(), a.inputs.correction, f.clusters.as_ref().map(|c| &c.1))?;
    let mut rep = Report::new(&[
        ("contrast", false),
        ("test", false),
        ("q", true),
        ("estimate", true),
        ("se", true),
        ("statistic", true),
        ("df1", true),
        ("df2", true),
        ("p_value", true),
    ]);
    for (expr, (cm, r)) in a.contrast.iter().zip(&parsed) {
        if cm.nrows() == 1 {
            let w = ctx.wald(&cm.row(0).transpose(), r[0])?;
            let p = match a.alternative {
                Alternative::TwoSided => w.p_value,
                Alternative::Greater if w.statistic >= 0.0 => w.p_value / 2.0,
                Alternative::Less if w.statistic <= 0.0 => w.p_value / 2.0,
                _ => 1.0 - w.p_value / 2.0,
            };
            rep.push(vec![
                expr.clone(),
                "t".into(),
                "1".into(),
                num(w.estimate),
                num(w.se),
                num(w.statistic),
                String::new(),
                num(w.df),
                num(p),
            ]);
        } else {
            let ft = ctx.f_test(cm, r)?;
            rep.push(vec![
                expr.clone(),
                "F".into(),
                ft.q.to_string(),
                String::new(),
                String::new(),
                num(ft.statistic),
                num(ft.df1),
                num(ft.df2),
                num(ft.p_value),
            ]);
        }
    }
    let text = match a.output.format {
        Format::Table => {
            let mut s = header_lines(&f, a.inputs.correction, prep.corrected());
            if a.alternative != Alternative::TwoSided {
                s += &format!("# alternative = {:?}\n", a.alternative).to_lowercase();
            }
            s + &rep.render(Format::Table)
        }
        Format::Csv => rep.render(Format::Csv),
    };
    emit(&text, a.output.out.as_deref(), out)
}

fn parse_covariates(specs: &[String]) -> Result<Vec<(String, Covariate)>, CliError> {
    specs
        .iter()
        .map(|s| {
            let (name, kind) = s
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("covariate `{s}`: expected NAME=normal|binary")))?;
            let kind = match kind.trim() {
                "normal" => Covariate::StandardNormal,
                "binary" => Covariate::BalancedBinary,
                k => return Err(CliError::Usage(format!("covariate `{name}`: unknown distribution `{k}`"))),
            };
            Ok((name.trim().to_string(), kind))
        })
        .collect()
}

/// Default generative values with `label=value` overrides applied.
fn generative_values(table: &ParameterTable, overrides: Option<&str>) -> Result<DVector<f64>, CliError> {
    let mut theta = default_generative_values(table);
    for item in overrides.into_iter().flat_map(|s| s.split(',')).map(str::trim).filter(|s| !s.is_empty()) {
        let (label, value) = item
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("`{item}`: expected label=value")))?;
        let k = table
            .index_of(label.trim())
            .ok_or_else(|| CliError::Usage(format!("unknown parameter `{}`", label.trim())))?;
        theta[k] = value
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("`{item}`: value is not a number")))?;
    }
    Ok(theta)
}

fn merge_covariates(base: &mut Vec<(String, Covariate)>, extra: Vec<(String, Covariate)>) {
    for (name, kind) in extra {
        base.retain(|(n, _)| *n != name);
        base.push((name, kind));
    }
}

fn study_config(a: &CalibrateArgs) -> Result<StudyConfig, CliError> {
    let mut config = match (&a.study, &a.generative, &a.model) {
        (Some(name), _, _) => {
            builtin_study(name).ok_or_else(|| CliError::Usage(format!("unknown study `{name}` (expected A, B or C)")))?
        }
        (None, Some(gen), Some(inv)) => {
            let generative = read_model(gen)?;
            let investigator = read_model(inv)?;
            if a.hypothesis.is_empty() {
                return Err(CliError::Usage("a custom study needs at least one --hypothesis".into()));
            }
            let defaults = builtin_study("A").expect("built-in study A");
            StudyConfig {
                name: "custom".into(),
                theta_true: default_generative_values(&index_parameters(&generative)),
                generative,
                investigator,
                covariates: Vec::new(),
                hypotheses: Vec::new(),
                robust: false,
                ..defaults
            }
        }
        _ => return Err(CliError::Usage("give --study or both --generative and --model".into())),
    };
    if a.theta.is_some() {
        config.theta_true = generative_values(&index_parameters(&config.generative), a.theta.as_deref())?;
    }
    merge_covariates(&mut config.covariates, parse_covariates(&a.covariate)?);
    for h in &a.hypothesis {
        let (name, expr) = match h.split_once(':') {
            Some((n, e)) => (n.trim().to_string(), e.trim().to_string()),
            None => (h.trim().to_string(), h.trim().to_string()),
        };
        config.hypotheses.retain(|x| x.name != name);
        config.hypotheses.push(Hypothesis { name, expr });
    }
    config.robust |= a.robust;
    if !a.n.is_empty() {
        config.sample_sizes = a.n.clone();
    }
    if let Some(r) = a.reps {
        config.replicates = r;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if !a.corrections.is_empty() {
        config.corrections = a.corrections.clone();
    }
    if !a.alpha.is_empty() {
        if let Some(bad) = a.alpha.iter().find(|x| !(**x > 0.0 && **x < 1.0)) {
            return Err(CliError::Usage(format!("rejection level {bad} outside (0, 1)")));
        }
        config.alphas = a.alpha.clone();
    }
    if config.replicates == 0 || config.sample_sizes.contains(&0) {
        return Err(CliError::Usage("replicates and sample sizes must be positive".into()));
    }
    Ok(config)
}

fn covariate_line(config: &StudyConfig) -> String {
    let table = index_parameters(&config.generative);
    let parts: Vec<String> = table
        .exogenous
        .iter()
        .map(|name| {
            let kind = config.covariates.iter().find(|(c, _)| c == name).map_or(Covariate::StandardNormal, |c| c.1);
            let kind = match kind {
                Covariate::StandardNormal => "standard normal",
                Covariate::BalancedBinary => "balanced 0/1",
            };
            format!("{name} {kind}")
        })
        .collect();
    format!("# covariates (assumed distributions): {}\n", parts.join(", "))
}

fn calibration_text(config: &StudyConfig, report: &CalibrationReport, format: Format) -> String {
    let mut rep = Report::new(&[
        ("study", false),
        ("hypothesis", false),
        ("n", true),
        ("correction", false),
        ("alpha", true),
        ("rejection_rate", true),
        ("used", true),
        ("discarded", true),
        ("mean_df", true),
        ("mean_se", true),
        ("discard_reasons", false),
    ]);
    for cell in &report.cells {
        let reasons: Vec<String> = cell.discarded.iter().map(|(k, v)| format!("{k}:{v}")).collect();
        for &(alpha, rate) in &cell.rejection_rates {
            rep.push(vec![
                report.study.clone(),
                cell.hypothesis.clone(),
                cell.n.to_string(),
                cell.correction.to_string(),
                num(alpha),
                num(rate),
                cell.used.to_string(),
                cell.discarded_total().to_string(),
                num(cell.mean_df),
                num(cell.mean_se),
                reasons.join(";"),
            ]);
        }
    }
    match format {
        Format::Table => {
            let mut s = version_line();
            s += &format!(
                "# study {}, seed {}, {} replicates per sample size{}\n",
                report.study,
                report.seed,
                report.replicates,
                if config.robust { ", cluster-robust tests" } else { "" }
            );
            s += &covariate_line(config);
            let hyps: Vec<String> = config.hypotheses.iter().map(|h| format!("{} ({})", h.name, h.expr)).collect();
            s += &format!("# hypotheses: {}\n", hyps.join(", "));
            s + &rep.render(Format::Table)
        }
        Format::Csv => rep.render(Format::Csv),
    }
}

pub fn calibrate(a: &CalibrateArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let config = study_config(a)?;
    let (report, failure) = match calibrate_type1(&config, a.workers) {
        Ok(r) => (r, None),
        Err(SimulationError::AllDiscarded { n, report }) => {
            (*report, Some(CliError::Numerical(format!("every replicate was discarded at n = {n}"))))
        }
        Err(e) => return Err(e.into()),
    };
    for (n, t) in &report.timing {
        let _ = writeln!(err, "n = {n}: {:.2?}", t);
    }
    emit(&calibration_text(&config, &report, a.output.format), a.output.out.as_deref(), out)?;
    failure.map_or(Ok(()), Err)
}

pub fn simulate(a: &SimulateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let (spec, mut covariates, theta) = match (&a.study, &a.model) {
        (Some(name), _) => {
            let s = builtin_study(name)
                .ok_or_else(|| CliError::Usage(format!("unknown study `{name}` (expected A, B or C)")))?;
            (s.generative, s.covariates, Some(s.theta_true))
        }
        (None, Some(path)) => (read_model(path)?, Vec::new(), None),
        (None, None) => return Err(CliError::Usage("give --study or --model".into())),
    };
    let table = index_parameters(&spec);
    let theta = match (theta, &a.theta) {
        (Some(t), None) => t,
        _ => generative_values(&table, a.theta.as_deref())?,
    };
    merge_covariates(&mut covariates, parse_covariates(&a.covariate)?);
    for (name, _) in &covariates {
        if !table.exogenous.contains(name) {
            return Err(CliError::Usage(format!("`{name}` is not an exogenous variable of the model")));
        }
    }
    let mut rng = replicate_rng(a.seed, a.n, 0);
    let data = draw(&table, &theta, a.n, &covariates, &mut rng)?;
    emit(&data.to_csv(&table), a.out.as_deref(), out)
}
