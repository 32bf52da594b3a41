//! Single entry point for the screening pipeline. Subcommands mirror the
//! pipeline stages; `run` chains them end to end and writes a manifest.
//! Progress and errors are emitted as line-delimited JSON events on stderr;
//! exit codes are stable per stage (see `rarescreen::Stage`).

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use rarescreen::dataset::{
    assign_folds, assign_splits, build_balanced_subset, load_dataset, write_fold_csv, write_id_csv,
    write_split_csv, Dataset, FoldAssignment, Split, SplitAssignment,
};
use rarescreen::density::{fit_condition_models, KernelMode};
use rarescreen::error::{Error, Result};
use rarescreen::evaluation::{cross_test, cross_validate, parameter_sweep, SweepParam};
use rarescreen::pipeline::{run_pipeline, RunConfig, StageEvent};
use rarescreen::predictor::Predictor;
use rarescreen::preprocess::{preprocess_file, PreprocessOptions};
use rarescreen::synth::{generate, SynthSpec};
use rarescreen::tsne::{fit_tsne, parse_vector_csv, KernelVariant, NeighborEmbedding, TsneConfig};
use rarescreen::{Mat, PipelineParams, Stage};

#[derive(Parser)]
#[command(name = "rarescreen", version, about = "Few-shot rare-condition screening pipeline")]
struct Cli {
    /// Seed for every random choice (splits, sampling, embeddings).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (0 = all cores). Results do not depend on this.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ParamArgs {
    /// Number of frequent conditions M.
    #[arg(long)]
    m: usize,
    /// PCA dimension P' (pass `inf` to skip PCA).
    #[arg(long, default_value = "50")]
    p_prime: String,
    /// Embedding dimension P''.
    #[arg(long, default_value_t = 2)]
    dims: usize,
    #[arg(long, default_value_t = 30.0)]
    perplexity: f64,
    /// Neighbor count K for the regression.
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 1000)]
    iters: usize,
    #[arg(long, default_value_t = 200.0)]
    learning_rate: f64,
    /// Output kernel: student_t or paper_sne.
    #[arg(long, default_value = "student_t")]
    variant: String,
    /// Density kernel normalization: normalized or paper_form.
    #[arg(long, default_value = "normalized")]
    kernel_mode: String,
    #[arg(long, default_value_t = 10)]
    folds: usize,
    /// Per-condition positive cap for the balanced subset.
    #[arg(long, default_value_t = 1500)]
    cap: usize,
    /// Normal samples added to the balanced subset.
    #[arg(long, default_value_t = 5000)]
    normals: usize,
}

impl ParamArgs {
    fn to_params(&self, seed: u64) -> Result<PipelineParams> {
        let p_prime = if self.p_prime == "inf" {
            None
        } else {
            Some(self.p_prime.parse().map_err(|_| Error::InvalidParameter {
                name: "p-prime".into(),
                message: format!("expected an integer or `inf`, got {:?}", self.p_prime),
            })?)
        };
        Ok(PipelineParams {
            m: self.m,
            p_prime,
            output_dim: self.dims,
            perplexity: self.perplexity,
            k: self.k,
            tsne_iterations: self.iters,
            tsne_learning_rate: self.learning_rate,
            kernel_variant: parse_variant(&self.variant)?,
            kernel_mode: parse_kernel_mode(&self.kernel_mode)?,
            n_folds: self.folds,
            seed,
        })
    }
}

fn parse_variant(name: &str) -> Result<KernelVariant> {
    match name {
        "student_t" => Ok(KernelVariant::StudentT),
        "paper_sne" => Ok(KernelVariant::PaperSne),
        other => Err(Error::InvalidParameter {
            name: "variant".into(),
            message: format!("expected student_t or paper_sne, got {other:?}"),
        }),
    }
}

fn parse_kernel_mode(name: &str) -> Result<KernelMode> {
    match name {
        "normalized" => Ok(KernelMode::Normalized),
        "paper_form" => Ok(KernelMode::PaperForm),
        other => Err(Error::InvalidParameter {
            name: "kernel-mode".into(),
            message: format!("expected normalized or paper_form, got {other:?}"),
        }),
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build the balanced subset, patient-grouped splits and folds.
    Split {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        m: usize,
        #[arg(long, default_value_t = 1500)]
        cap: usize,
        #[arg(long, default_value_t = 5000)]
        normals: usize,
        #[arg(long, default_value_t = 10)]
        folds: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Normalize fundus photographs (crop, resize, illumination).
    Preprocess {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        roi_threshold: u8,
        #[arg(long, default_value_t = 5.0)]
        sigma: f64,
    },
    /// Generate a synthetic dataset from a JSON spec.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the linear reduction and project the input features.
    Pca {
        #[arg(long)]
        features: PathBuf,
        #[arg(long, default_value_t = 50)]
        p_prime: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed projected vectors (CSV `sample_id,<v0>,...`).
    Tsne {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 30.0)]
        perplexity: f64,
        #[arg(long, default_value_t = 2)]
        dims: usize,
        #[arg(long, default_value_t = 1000)]
        iters: usize,
        #[arg(long, default_value = "student_t")]
        variant: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit per-condition density models over an embedding.
    FitDensity {
        #[arg(long)]
        embedding: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value = "normalized")]
        kernel_mode: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score new feature vectors with a serialized predictor.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        features: PathBuf,
        /// Output CSV file `sample_id,q_1..q_N`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Sensitivity gradient of one condition's prediction.
    Gradient {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        condition: String,
        /// Output CSV file `sample_id,g0..g{P-1}`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-validation (`cv`) or cross-testing (`test`) evaluation.
    Evaluate {
        #[arg(long)]
        mode: String,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[command(flatten)]
        params: ParamArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Average AUC as a function of one swept parameter.
    Sweep {
        /// One of pprime, psecond, perplexity, k.
        #[arg(long)]
        param: String,
        /// Comma-separated values (`inf` allowed for pprime).
        #[arg(long)]
        values: String,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[command(flatten)]
        params: ParamArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full pipeline: split, evaluate, fit and serialize the predictor.
    Run {
        /// JSON config; command-line arguments override nothing when given.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        m: Option<usize>,
        /// `test` (default) or `cv`.
        #[arg(long, default_value = "test")]
        protocol: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn emit(event: &StageEvent) {
    eprintln!("{}", serde_json::to_string(event).expect("event serializes"));
}

fn emit_stage(stage: &str, start: Instant, details: serde_json::Value) {
    emit(&StageEvent {
        stage: stage.into(),
        elapsed_ms: start.elapsed().as_millis(),
        details,
    });
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .ok();
    }
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let stage = err.stage();
            eprintln!(
                "{}",
                serde_json::json!({
                    "stage": stage.name(),
                    "error": err.to_string(),
                    "exit_code": stage.exit_code(),
                })
            );
            ExitCode::from(stage.exit_code() as u8)
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Split {
            features,
            labels,
            m,
            cap,
            normals,
            folds,
            out,
        } => {
            let start = Instant::now();
            let dataset = load_dataset(&features, &labels).map_err(|e| e.in_stage(Stage::Dataset))?;
            let balanced = build_balanced_subset(&dataset, m, cap, normals, seed)?;
            let splits = assign_splits(&dataset, &balanced, seed)?;
            std::fs::create_dir_all(&out)?;
            write_id_csv(&balanced, &out.join("balanced.csv"))?;
            write_split_csv(&splits, &out.join("splits.csv"))?;
            for (split, name) in [(Split::Valid, "folds_valid.csv"), (Split::Test, "folds_test.csv")] {
                let fold_assignment = folds_over(&dataset, &splits, split, folds, seed)?;
                write_fold_csv(&fold_assignment, &out.join(name))?;
            }
            emit_stage(
                "split",
                start,
                serde_json::json!({
                    "balanced": balanced.len(),
                    "learn": splits.ids_in(Split::Learn).len(),
                    "valid": splits.ids_in(Split::Valid).len(),
                    "test": splits.ids_in(Split::Test).len(),
                }),
            );
            Ok(())
        }
        Command::Preprocess {
            input,
            out,
            roi_threshold,
            sigma,
        } => {
            let start = Instant::now();
            let opts = PreprocessOptions {
                roi_threshold,
                sigma,
            };
            std::fs::create_dir_all(&out)?;
            let mut processed = 0usize;
            let mut entries: Vec<PathBuf> = std::fs::read_dir(&input)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|ext| ext.eq_ignore_ascii_case("png")))
                .collect();
            entries.sort();
            for path in entries {
                let name = path.file_name().expect("file has a name");
                let warnings = preprocess_file(&path, &out.join(name), &opts)
                    .map_err(|e| e.in_stage(Stage::Preprocess))?;
                for w in warnings {
                    emit(&StageEvent {
                        stage: "preprocess".into(),
                        elapsed_ms: start.elapsed().as_millis(),
                        details: serde_json::json!({"file": name.to_string_lossy(), "warning": w}),
                    });
                }
                processed += 1;
            }
            emit_stage("preprocess", start, serde_json::json!({"images": processed}));
            Ok(())
        }
        Command::Synth { spec, out } => {
            let start = Instant::now();
            if !spec.exists() {
                return Err(Error::FileNotFound(spec).in_stage(Stage::Synth));
            }
            let spec = SynthSpec::from_json(&std::fs::read_to_string(&spec)?)
                .map_err(|e| e.in_stage(Stage::Synth))?;
            let output = generate(&spec).map_err(|e| e.in_stage(Stage::Synth))?;
            output.write_files(&out)?;
            emit_stage(
                "synth",
                start,
                serde_json::json!({"samples": output.feature_rows.len()}),
            );
            Ok(())
        }
        Command::Pca {
            features,
            p_prime,
            out,
        } => {
            let start = Instant::now();
            let (ids, data) = read_feature_matrix(&features)?;
            let model =
                rarescreen::pca::fit_pca(&data, p_prime).map_err(|e| e.in_stage(Stage::Pca))?;
            let projected =
                rarescreen::pca::project_batch(&model, &data).map_err(|e| e.in_stage(Stage::Pca))?;
            std::fs::create_dir_all(&out)?;
            model.save(&out.join("pca.json"))?;
            write_vector_csv(&out.join("pi.csv"), &ids, &projected, "p")?;
            emit_stage(
                "pca",
                start,
                serde_json::json!({"p": model.p, "p_prime": model.p_prime}),
            );
            Ok(())
        }
        Command::Tsne {
            input,
            perplexity,
            dims,
            iters,
            variant,
            out,
        } => {
            let start = Instant::now();
            if !input.exists() {
                return Err(Error::FileNotFound(input).in_stage(Stage::Io));
            }
            let (ids, pi) = parse_vector_csv(std::fs::File::open(&input)?, &input)?;
            let config = TsneConfig {
                perplexity,
                output_dim: dims,
                iterations: iters,
                kernel_variant: parse_variant(&variant)?,
                seed,
                ..TsneConfig::default()
            };
            let embedding = fit_tsne(&pi, &ids, &config).map_err(|e| e.in_stage(Stage::Tsne))?;
            std::fs::create_dir_all(&out)?;
            embedding.write_csv(&out.join("embedding.csv"))?;
            embedding.write_meta_json(&out.join("embedding_meta.json"))?;
            emit_stage(
                "tsne",
                start,
                serde_json::json!({
                    "samples": embedding.sample_ids.len(),
                    "initial_cost": embedding.initial_cost,
                    "final_cost": embedding.final_cost,
                }),
            );
            Ok(())
        }
        Command::FitDensity {
            embedding,
            labels,
            kernel_mode,
            out,
        } => {
            let start = Instant::now();
            if !embedding.exists() {
                return Err(Error::FileNotFound(embedding).in_stage(Stage::Io));
            }
            let (ids, tau) = parse_vector_csv(std::fs::File::open(&embedding)?, &embedding)?;
            let table = rarescreen::dataset::parse_labels_csv(std::fs::File::open(&labels)?, &labels)?;
            let mut by_id: std::collections::HashMap<String, Vec<u8>> = table
                .rows
                .into_iter()
                .map(|(id, row, _)| (id, row))
                .collect();
            let mut label_rows = Vec::with_capacity(ids.len());
            for id in &ids {
                let row = by_id.remove(id).ok_or_else(|| Error::SampleIdMismatch {
                    message: format!("embedding sample {id:?} missing from labels"),
                })?;
                label_rows.push(row);
            }
            let neighbor_embedding = NeighborEmbedding {
                sample_ids: ids,
                tau,
                bandwidths: Vec::new(),
                initial_cost: 0.0,
                final_cost: 0.0,
                cost_trace: Vec::new(),
                config: TsneConfig::default(),
                warnings: Vec::new(),
            };
            let fit = fit_condition_models(
                &neighbor_embedding,
                &label_rows,
                &table.condition_names,
                parse_kernel_mode(&kernel_mode)?,
            )
            .map_err(|e| e.in_stage(Stage::Density))?;
            let density_dir = out.join("density");
            std::fs::create_dir_all(&density_dir)?;
            for model in &fit.models {
                std::fs::write(
                    density_dir.join(format!("{:02}_{}.json", model.n + 1, model.name)),
                    model.to_json()?,
                )?;
            }
            fit.reference.write_csv(&out.join("reference_q.csv"))?;
            emit_stage(
                "density",
                start,
                serde_json::json!({
                    "models": fit.models.len(),
                    "omitted": fit.omitted.iter().map(|o| o.name.clone()).collect::<Vec<_>>(),
                }),
            );
            Ok(())
        }
        Command::Predict {
            model,
            features,
            out,
        } => {
            let start = Instant::now();
            let predictor = Predictor::load(&model).map_err(|e| e.in_stage(Stage::Predictor))?;
            let (ids, data) = read_feature_matrix(&features)?;
            let scores = predictor
                .predict_batch(&data)
                .map_err(|e| e.in_stage(Stage::Predictor))?;
            write_scores_csv(&out, &ids, &scores)?;
            emit_stage("predict", start, serde_json::json!({"samples": ids.len()}));
            Ok(())
        }
        Command::Gradient {
            model,
            features,
            condition,
            out,
        } => {
            let start = Instant::now();
            let predictor = Predictor::load(&model).map_err(|e| e.in_stage(Stage::Predictor))?;
            let index = predictor
                .condition_index(&condition)
                .ok_or_else(|| Error::InvalidParameter {
                    name: "condition".into(),
                    message: format!("unknown condition {condition:?}"),
                })?;
            let (ids, data) = read_feature_matrix(&features)?;
            let mut rows = Vec::with_capacity(ids.len());
            for row in data.rows_iter() {
                rows.push(
                    predictor
                        .prediction_gradient(row, index)
                        .map_err(|e| e.in_stage(Stage::Predictor))?,
                );
            }
            write_vector_csv(&out, &ids, &Mat::from_rows(&rows), "g")?;
            emit_stage(
                "gradient",
                start,
                serde_json::json!({"samples": ids.len(), "condition": condition}),
            );
            Ok(())
        }
        Command::Evaluate {
            mode,
            features,
            labels,
            params,
            out,
        } => {
            let start = Instant::now();
            let pipeline_params = params.to_params(seed)?;
            let (dataset, splits) = prepare_dataset(&features, &labels, &params, seed)?;
            let report = match mode.as_str() {
                "cv" => {
                    let folds =
                        folds_over(&dataset, &splits, Split::Valid, pipeline_params.n_folds, seed)?;
                    cross_validate(&dataset, &splits, &folds, &pipeline_params)
                }
                "test" => {
                    let folds =
                        folds_over(&dataset, &splits, Split::Test, pipeline_params.n_folds, seed)?;
                    cross_test(&dataset, &splits, &folds, &pipeline_params)
                }
                other => Err(Error::InvalidParameter {
                    name: "mode".into(),
                    message: format!("expected cv or test, got {other:?}"),
                }),
            }
            .map_err(|e| e.in_stage(Stage::Evaluation))?;
            std::fs::create_dir_all(&out)?;
            report.save(&out.join("report.json"))?;
            let roc_dir = out.join("roc");
            std::fs::create_dir_all(&roc_dir)?;
            for outcome in &report.conditions {
                if let Some(roc) = &outcome.roc {
                    roc.write_csv(&roc_dir.join(format!("{:02}_{}.csv", outcome.index, outcome.name)))?;
                }
            }
            emit_stage(
                "evaluation",
                start,
                serde_json::json!({
                    "mode": report.mode,
                    "average_auc": report.average_auc,
                    "average_auc_rare": report.average_auc_rare,
                }),
            );
            Ok(())
        }
        Command::Sweep {
            param,
            values,
            features,
            labels,
            params,
            out,
        } => {
            let start = Instant::now();
            let pipeline_params = params.to_params(seed)?;
            let (dataset, splits) = prepare_dataset(&features, &labels, &params, seed)?;
            let folds = folds_over(&dataset, &splits, Split::Valid, pipeline_params.n_folds, seed)?;
            let sweep_param = SweepParam::parse(&param)?;
            let value_list: Vec<String> = values.split(',').map(str::to_string).collect();
            let table = parameter_sweep(
                &dataset,
                &splits,
                &folds,
                &pipeline_params,
                sweep_param,
                &value_list,
            )
            .map_err(|e| e.in_stage(Stage::Evaluation))?;
            std::fs::create_dir_all(&out)?;
            table.write_csv(&out.join("sweep.csv"))?;
            emit_stage(
                "sweep",
                start,
                serde_json::json!({"param": param, "settings": table.rows.len()}),
            );
            Ok(())
        }
        Command::Run {
            config,
            features,
            labels,
            m,
            protocol,
            out,
        } => {
            let run_config = match config {
                Some(path) => {
                    if !path.exists() {
                        return Err(Error::FileNotFound(path).in_stage(Stage::Io));
                    }
                    RunConfig::from_json(&std::fs::read_to_string(&path)?)?
                }
                None => {
                    let missing = |name: &str| Error::InvalidParameter {
                        name: name.into(),
                        message: "required unless --config is given".into(),
                    };
                    RunConfig {
                        features: features.ok_or_else(|| missing("features"))?,
                        labels: labels.ok_or_else(|| missing("labels"))?,
                        params: PipelineParams::defaults(m.ok_or_else(|| missing("m"))?, seed),
                        per_condition_cap: 1500,
                        normal_count: 5000,
                        protocol,
                    }
                }
            };
            run_pipeline(&run_config, &out, &mut emit)?;
            Ok(())
        }
    }
}

fn folds_over(
    dataset: &Dataset,
    splits: &SplitAssignment,
    split: Split,
    n_folds: usize,
    seed: u64,
) -> Result<FoldAssignment> {
    let mut ids = Vec::new();
    let mut patients = Vec::new();
    for r in &dataset.records {
        if splits.get(&r.sample_id) == Some(split) {
            ids.push(r.sample_id.clone());
            patients.push(r.patient_id.clone());
        }
    }
    assign_folds(&ids, &patients, n_folds, seed)
}

fn prepare_dataset(
    features: &Path,
    labels: &Path,
    params: &ParamArgs,
    seed: u64,
) -> Result<(Dataset, SplitAssignment)> {
    let dataset = load_dataset(features, labels).map_err(|e| e.in_stage(Stage::Dataset))?;
    let balanced = build_balanced_subset(&dataset, params.m, params.cap, params.normals, seed)?;
    let splits = assign_splits(&dataset, &balanced, seed)?;
    Ok((dataset, splits))
}

fn read_feature_matrix(path: &Path) -> Result<(Vec<String>, Mat)> {
    if !path.exists() {
        return Err(Error::FileNotFound(path.to_path_buf()).in_stage(Stage::Dataset));
    }
    let rows = rarescreen::dataset::parse_features_csv(std::fs::File::open(path)?, path)
        .map_err(|e| e.in_stage(Stage::Dataset))?;
    let ids = rows.iter().map(|r| r.sample_id.clone()).collect();
    let data = Mat::from_rows(&rows.iter().map(|r| r.features.clone()).collect::<Vec<_>>());
    Ok((ids, data))
}

fn write_vector_csv(path: &Path, ids: &[String], data: &Mat, prefix: &str) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["sample_id".to_string()];
    header.extend((0..data.ncols()).map(|k| format!("{prefix}{k}")));
    w.write_record(&header)?;
    for (id, row) in ids.iter().zip(data.rows_iter()) {
        let mut record = vec![id.clone()];
        record.extend(row.iter().map(|v| format!("{v}")));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

fn write_scores_csv(path: &Path, ids: &[String], scores: &Mat) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["sample_id".to_string()];
    header.extend((1..=scores.ncols()).map(|n| format!("q_{n}")));
    w.write_record(&header)?;
    for (id, row) in ids.iter().zip(scores.rows_iter()) {
        let mut record = vec![id.clone()];
        record.extend(row.iter().map(|v| format!("{v}")));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}
