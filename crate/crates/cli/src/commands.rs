use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use collapse_lab::bounds;
use collapse_lab::dataset::{self, Container, ProvenancedDataset};
use collapse_lab::diffusion::FrozenEncoder;
use collapse_lab::harness::{self, GenerationReport, LoopConfig, Strategy, TstarRule};
use collapse_lab::metrics;
use collapse_lab::ole::{self, LabelSource, ScanSettings};
use collapse_lab::probe;
use collapse_lab::rng;

use crate::config::Settings;
use crate::report::{self, Series};
use crate::{CliError, Theorem};

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}

fn write_lsfd(path: &Path, c: &Container) -> Result<(), CliError> {
    let f = File::create(path).map_err(|e| CliError::Io(format!("cannot create {}: {e}", path.display())))?;
    dataset::write_container(BufWriter::new(f), c)?;
    Ok(())
}

fn read_lsfd(path: &Path) -> Result<Container, CliError> {
    let f = File::open(path).map_err(|e| CliError::Io(format!("cannot open {}: {e}", path.display())))?;
    Ok(dataset::read_container(BufReader::new(f))?)
}

fn first_config(settings: &Settings) -> Result<LoopConfig, CliError> {
    let first = settings.strategies()?[0];
    settings.loop_config(first)
}

pub fn write_manifest(out: &Path, command: &str, settings: &Settings) -> Result<(), CliError> {
    let stamp = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let mut text = String::from("# Resolved settings of one run; pass back with --config to repeat it.\n[manifest]\n");
    let _ = writeln!(text, "command = {command}");
    let _ = writeln!(text, "version = {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(text, "timestamp = {stamp}");
    let _ = writeln!(text, "out = {}\n", out.display());
    text.push_str(&settings.to_text());
    write_text(&out.join("manifest.cfg"), &text)
}

pub fn gen_data(settings: &Settings, out: &Path) -> Result<bool, CliError> {
    let cfg = first_config(settings)?;
    let truth = harness::ground_truth(&cfg)?;
    let data = harness::initial_real(&cfg, &truth);
    write_lsfd(&out.join("data.lsfd"), &Container::with_dataset(data.clone()))?;
    println!("wrote {} real samples (d={}, {} classes) to {}", data.len(), data.dim(), cfg.classes, out.join("data.lsfd").display());
    Ok(true)
}

/// Fixed t*, or the grid timestep minimising mean OLE of `data`.
fn choose_tstar(cfg: &LoopConfig, data: &ProvenancedDataset, encoder: &FrozenEncoder) -> Result<usize, CliError> {
    match cfg.tstar {
        TstarRule::Fixed(t) => Ok(t),
        TstarRule::MinRealOle { grid_steps } => {
            let g = grid_steps.max(1);
            let grid: Vec<usize> = (1..=g).map(|i| (i * cfg.timesteps / g).max(1)).collect();
            let table = ole::ole_scan(
                &[(0, data)],
                encoder,
                &grid,
                ScanSettings {
                    batch_size: cfg.ole_batch,
                    batches: cfg.ole_batches,
                    labels: LabelSource::GroundTruth,
                    seed: rng::sub_seed(cfg.seed, &[12]),
                },
            )?;
            Ok(table.argmin_timestep(0).expect("non-empty grid"))
        }
    }
}

pub fn train_probe(settings: &Settings, out: &Path, data_path: &Path) -> Result<bool, CliError> {
    let cfg = first_config(settings)?;
    let data = read_lsfd(data_path)?.dataset;
    let classes = data.class_count().max(cfg.classes);
    let encoder = FrozenEncoder::fit(&data.features, cfg.latent_dim.unwrap_or(data.dim()), cfg.schedule()?)?;
    let tstar = choose_tstar(&cfg, &data, &encoder)?;
    let latents = encoder.encode_batch(&data.features, tstar, rng::sub_seed(cfg.seed, &[14]))?;
    let (p, history) = probe::train_probe_traced(&latents, &data.labels, classes, cfg.probe, tstar)?;
    let correct = (0..data.len())
        .filter(|&j| p.predict(&latents.column(j).into_owned()).map(|y| y == data.labels[j]).unwrap_or(false))
        .count();
    let mut csv = String::from("epoch,loss\n");
    for (e, l) in history.iter().enumerate() {
        let _ = writeln!(csv, "{e},{l}");
    }
    write_text(&out.join("probe_loss.csv"), &csv)?;
    let container = Container { dataset: ProvenancedDataset::empty(data.dim()), model: None, probe: Some(p), encoder: Some(encoder) };
    write_lsfd(&out.join("probe.lsfd"), &container)?;
    println!("t* = {tstar}; training accuracy {:.4}; final loss {:.6}", correct as f64 / data.len() as f64, history.last().copied().unwrap_or(f64::NAN));
    Ok(true)
}

pub fn filter(settings: &Settings, out: &Path, data_path: &Path, probe_path: &Path) -> Result<bool, CliError> {
    let cfg = first_config(settings)?;
    let pool = read_lsfd(data_path)?.dataset;
    let c = read_lsfd(probe_path)?;
    let (Some(p), Some(encoder)) = (c.probe, c.encoder) else {
        return Err(CliError::Config(format!("{} lacks a probe or encoder section", probe_path.display())));
    };
    let seed = rng::sub_seed(cfg.seed, &[9]);
    let scores = probe::score_dataset(&pool, &p, &encoder, seed)?;
    let kept = probe::top_indices(&scores, cfg.budget);
    let filtered = pool.select(&kept);
    let mut csv = String::from("index,label,generation,real,confidence,kept\n");
    let mut is_kept = vec![false; pool.len()];
    for &i in &kept {
        is_kept[i] = true;
    }
    for i in 0..pool.len() {
        let _ = writeln!(csv, "{i},{},{},{},{},{}", pool.labels[i], pool.generations[i], u8::from(pool.real[i]), scores[i], u8::from(is_kept[i]));
    }
    write_text(&out.join("scores.csv"), &csv)?;
    write_lsfd(&out.join("filtered.lsfd"), &Container::with_dataset(filtered.clone()))?;
    let (g0, r0) = dataset::provenance_stats(&pool)?;
    let (g1, r1) = dataset::provenance_stats(&filtered)?;
    println!("kept {} of {}; mean generation {g0:.3} -> {g1:.3}; real ratio {r0:.3} -> {r1:.3}", filtered.len(), pool.len());
    Ok(true)
}

fn metric_charts(out: &Path, reports: &[(Strategy, Vec<GenerationReport>)]) -> Result<(), CliError> {
    type Pick = fn(&GenerationReport) -> f64;
    let metrics: [(&str, &str, Pick); 7] = [
        ("fid", "Fréchet distance", |r| r.fid),
        ("precision", "precision", |r| r.precision),
        ("recall", "recall", |r| r.recall),
        ("ole_tstar", "OLE at t*", |r| r.ole_tstar),
        ("median_conf", "median confidence", |r| r.median_conf),
        ("real_ratio", "real ratio of training set", |r| r.real_ratio),
        ("mean_gen_tag", "mean generation tag of training set", |r| r.mean_gen_tag),
    ];
    for (file, label, pick) in metrics {
        let series: Vec<Series> = reports
            .iter()
            .map(|(s, rs)| Series { name: s.name().to_string(), points: rs.iter().map(|r| (r.generation as f64, pick(r))).collect() })
            .collect();
        write_text(&out.join(format!("{file}.svg")), &report::line_chart(label, "generation", label, &series))?;
    }
    Ok(())
}

pub fn run_loop(settings: &Settings, out: &Path) -> Result<bool, CliError> {
    let strategies = settings.strategies()?;
    let base = settings.loop_config(strategies[0])?;
    let ctx = harness::build_context(&base)?;
    let mut csv = String::from(harness::REPORT_HEADER);
    csv.push('\n');
    let mut all = Vec::new();
    let mut failures = String::new();
    for &s in &strategies {
        let cfg = LoopConfig { strategy: s, ..base.clone() };
        let outcome = harness::run_loop_with(&cfg, &ctx)?;
        for r in &outcome.reports {
            csv.push_str(&r.csv_row());
            csv.push('\n');
        }
        if let Some(f) = &outcome.failure {
            let _ = writeln!(failures, "{}: {f}", s.name());
        }
        let last = outcome.reports.last().expect("generation 0 is always reported");
        println!(
            "{:<10} t*={:<4} final generation {:>2}: fid {:.4} precision {:.3} recall {:.3} real ratio {:.3}",
            s.name(),
            outcome.tstar,
            last.generation,
            last.fid,
            last.precision,
            last.recall,
            last.real_ratio
        );
        let container = Container {
            dataset: outcome.final_training_set.clone(),
            model: Some(outcome.final_model.clone()),
            probe: Some(outcome.probe.clone()),
            encoder: Some(outcome.encoder.clone()),
        };
        write_lsfd(&out.join(format!("final_{}.lsfd", s.name())), &container)?;
        all.push((s, outcome.reports));
    }
    write_text(&out.join("reports.csv"), &csv)?;
    if settings.svg()? {
        metric_charts(out, &all)?;
    }
    if failures.is_empty() {
        Ok(true)
    } else {
        eprint!("{failures}");
        write_text(&out.join("failures.txt"), &failures)?;
        Ok(false)
    }
}

pub fn ole_scan(settings: &Settings, out: &Path) -> Result<bool, CliError> {
    let strategies = settings.strategies()?;
    let base = settings.loop_config(strategies[0])?;
    let scan = settings.scan()?;
    let ctx = harness::build_context(&base)?;
    let g = scan.grid_steps.max(1);
    let grid: Vec<usize> = std::iter::once(0).chain((1..=g).map(|i| (i * base.timesteps / g).max(1))).collect();
    for &s in &strategies {
        let cfg = LoopConfig { strategy: s, ..base.clone() };
        let outcome = harness::run_loop_with(&cfg, &ctx)?;
        let sets: Vec<(u32, &ProvenancedDataset)> = outcome.samples.iter().enumerate().map(|(k, d)| (k as u32, d)).collect();
        let table = ole::ole_scan(
            &sets,
            &outcome.encoder,
            &grid,
            ScanSettings {
                batch_size: scan.batch_size,
                batches: scan.batches,
                labels: if scan.kmeans { LabelSource::KMeans(cfg.classes) } else { LabelSource::GroundTruth },
                seed: rng::sub_seed(cfg.seed, &[16, s as u64]),
            },
        )?;
        write_text(&out.join(format!("ole_scan_{}.csv", s.name())), &table.to_csv())?;
        if settings.svg()? {
            let rows: Vec<String> = sets.iter().map(|(k, _)| k.to_string()).collect();
            let cols: Vec<String> = grid.iter().map(usize::to_string).collect();
            let values: Vec<Vec<f64>> = sets
                .iter()
                .map(|(k, _)| table.cells.iter().filter(|c| c.generation == *k).map(|c| c.mean).collect())
                .collect();
            let svg = report::heat_grid(&format!("OLE, {}", s.name()), "generation", "timestep", &rows, &cols, &values);
            write_text(&out.join(format!("ole_scan_{}.svg", s.name())), &svg)?;
        }
        let argmins: Vec<String> = sets.iter().map(|(k, _)| table.argmin_timestep(*k).map_or("-".into(), |t| t.to_string())).collect();
        println!("{:<10} {} generations scanned; argmin timestep per generation: {}", s.name(), sets.len(), argmins.join(" "));
    }
    Ok(true)
}

fn verdict(name: &str, ok: bool) -> bool {
    println!("{} {name}", if ok { "PASS" } else { "FAIL" });
    ok
}

pub fn verify(settings: &Settings, out: &Path, theorem: Theorem) -> Result<bool, CliError> {
    let seed = settings.seed()?;
    let svg = settings.svg()?;
    match theorem {
        Theorem::Ole => {
            let v = settings.ole_bound()?;
            let rep = bounds::verify_theorem1(v.d, v.r, v.n, &v.cosines, v.trials, seed)?;
            write_text(&out.join("verify_ole.csv"), &rep.to_csv())?;
            for r in &rep.rows {
                if r.skipped {
                    println!("cosine {:.4}: skipped (above 1/r)", r.parameter);
                } else {
                    println!("cosine {:.4}: E[OLE] {:.4} ± {:.4}, bound {:.4}", r.parameter, r.mc_mean, r.mc_stderr, r.bounds[0]);
                }
            }
            if svg {
                let active: Vec<_> = rep.rows.iter().filter(|r| !r.skipped).collect();
                let series = vec![
                    Series { name: "Monte Carlo".into(), points: active.iter().map(|r| (r.parameter, r.mc_mean)).collect() },
                    Series { name: "lower bound".into(), points: active.iter().map(|r| (r.parameter, r.bounds[0])).collect() },
                ];
                write_text(&out.join("verify_ole.svg"), &report::line_chart("expected OLE vs bound", "cosine", "OLE", &series))?;
            }
            let mut ok = verdict("bound holds at every cosine", rep.row_satisfied(0));
            for (name, pass) in &rep.checks {
                ok &= verdict(name, *pass);
            }
            Ok(ok)
        }
        Theorem::Confidence => {
            let v = settings.confidence_bound()?;
            let thetas = v.thetas();
            let mut csv = String::new();
            let mut ok = true;
            let mut series = Vec::new();
            for (i, &sigma) in v.sigmas.iter().enumerate() {
                let rep = bounds::verify_theorem2(v.d, v.r, sigma, &thetas, v.trials, rng::sub_seed(seed, &[i as u64]))?;
                for (j, line) in rep.to_csv().lines().enumerate() {
                    if j == 0 && i > 0 {
                        continue;
                    }
                    let _ = writeln!(csv, "{},{line}", if j == 0 { "sigma".to_string() } else { sigma.to_string() });
                }
                for r in &rep.rows {
                    println!(
                        "sigma {sigma}: theta {:.4}: E[conf] {:.5} ± {:.5}, stated {:.5}, jensen {:.5}",
                        r.parameter, r.mc_mean, r.mc_stderr, r.bounds[0], r.bounds[1]
                    );
                    if !r.satisfied[0] {
                        println!("note: stated-form bound exceeded at theta={:.4}, sigma={sigma} (reported, not asserted)", r.parameter);
                    }
                }
                ok &= verdict(&format!("jensen-form bound holds (sigma={sigma})"), rep.row_satisfied(1));
                for (name, pass) in &rep.checks {
                    ok &= verdict(&format!("{name} (sigma={sigma})"), *pass);
                }
                series.push(Series { name: format!("MC sigma={sigma}"), points: rep.rows.iter().map(|r| (r.parameter, r.mc_mean)).collect() });
                series.push(Series { name: format!("bound sigma={sigma}"), points: rep.rows.iter().map(|r| (r.parameter, r.bounds[1])).collect() });
            }
            write_text(&out.join("verify_confidence.csv"), &csv)?;
            if svg {
                write_text(&out.join("verify_confidence.svg"), &report::line_chart("expected confidence", "theta", "confidence", &series))?;
            }
            Ok(ok)
        }
        Theorem::Lemmas => {
            let (cases, chi) = settings.lemmas()?;
            let rep = bounds::verify_lemmas(cases, chi, seed)?;
            write_text(&out.join("verify_lemmas.csv"), &rep.to_csv())?;
            let mut ok = true;
            for c in &rep.inequalities {
                ok &= verdict(&format!("{} ({} cases, min slack {:.3e})", c.name, c.cases, c.min_slack), c.violations == 0);
            }
            let c = &rep.chi_mean;
            ok &= verdict(
                &format!("chi mean, {} dof: {:.5} ± {:.5} vs {:.5}", c.dof, c.mc_mean, c.mc_stderr, c.expected),
                c.within_three_stderr,
            );
            Ok(ok)
        }
    }
}

pub fn metrics(settings: &Settings, out: &Path, real: &Path, synth: &Path) -> Result<bool, CliError> {
    let k = settings.metrics_k()?;
    let a = read_lsfd(real)?.dataset;
    let b = read_lsfd(synth)?.dataset;
    let fd = metrics::frechet_distance(&a.features, &b.features)?;
    let (p, r) = metrics::knn_precision_recall(&a.features, &b.features, k)?;
    let csv = format!("fid,precision,recall,n_real,n_synth,k\n{fd},{p},{r},{},{},{k}\n", a.len(), b.len());
    write_text(&out.join("metrics.csv"), &csv)?;
    println!("fid {fd:.6} precision {p:.4} recall {r:.4}");
    Ok(true)
}
