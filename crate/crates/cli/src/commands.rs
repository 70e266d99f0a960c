use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use pim_core::analytics::{dataset_summary, parse_tallies, IntervalMethod};
use pim_core::encode::{drive_encoder, mock_encode, EncodeJob};
use pim_core::features::{assemble, frame_features, parse_layout, ExternalTensors, FeatureStack};
use pim_core::gridmap::{grid_dims, pool_to_grid, quantize_classes};
use pim_core::media::{load_pgm, load_y4m, read_dqp, read_tensor, save_pgm, write_dqp, write_tensor};
use pim_core::metrics::{block_vif, mb_psnr, mb_ssim, MetricGrid, MetricKind};
use pim_core::pimm::{load_weights, predict_map, save_weights, train_with, TrainConfig};
use pim_core::qpsolver::solve_dqp;
use pim_core::{DqpSidecar, FeatureTensor, ImportanceMap, MacroblockGrid, VideoSequence, MB_SIZE};
use rayon::prelude::*;

use crate::args::*;

fn load_video(path: &Path) -> Result<VideoSequence> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    load_y4m(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

fn load_map(path: &Path) -> Result<ImportanceMap> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    load_pgm(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

fn load_tensor(path: &Path) -> Result<FeatureTensor> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_tensor(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn frame_name(prefix: &str, i: usize, ext: &str) -> String {
    format!("{prefix}_{i:05}.{ext}")
}

pub fn solve_qp(args: &SolveQpArgs) -> Result<()> {
    let cfg = args.solver.config();
    let maps = args.maps.iter().map(|p| load_map(p)).collect::<Result<Vec<_>>>()?;
    let (w, h) = match &args.video {
        Some(v) => load_video(v)?.dims().context("video has no frames")?,
        None => (maps[0].width(), maps[0].height()),
    };
    let solved = maps
        .par_iter()
        .map(|m| Ok(solve_dqp(&pool_to_grid(m, w, h)?, &cfg)?))
        .collect::<Result<Vec<_>>>()?;
    let (rows, cols) = grid_dims(w, h);
    let mut values = Vec::with_capacity(maps.len() * rows * cols);
    let mut mean = 0.0;
    for (i, (dqp, report)) in solved.iter().enumerate() {
        println!(
            "frame {i}: offset {:.4} ratio {:.6} rounded {:.4}",
            report.offset, report.real_ratio, report.rounded_ratio
        );
        values.extend_from_slice(dqp.cells());
        mean += report.rounded_ratio / solved.len() as f64;
    }
    let sidecar = DqpSidecar::new(maps.len(), rows, cols, values)?;
    let mut out = create(&args.out)?;
    write_dqp(&sidecar, &mut out)?;
    out.flush()?;
    println!("ratio {mean:.4}");
    Ok(())
}

fn metric_tensor(m: &MetricGrid) -> Result<FeatureTensor> {
    let g = &m.grid;
    Ok(FeatureTensor::new(g.rows(), g.cols(), 1, g.cells().iter().map(|&v| v as f32).collect())?)
}

fn metric_grids(reference: &VideoSequence, distorted: &VideoSequence, i: usize) -> Result<Vec<MetricGrid>> {
    let (a, b) = (&reference.frames()[i], &distorted.frames()[i]);
    Ok(vec![mb_psnr(a, b)?, mb_ssim(a, b)?, block_vif(a, b)?])
}

fn same_length(a: &VideoSequence, b: &VideoSequence) -> Result<()> {
    ensure!(a.len() == b.len(), "reference has {} frames, distorted has {}", a.len(), b.len());
    Ok(())
}

pub fn metrics(args: &MetricsArgs) -> Result<()> {
    let reference = load_video(&args.reference)?;
    let distorted = load_video(&args.distorted)?;
    same_length(&reference, &distorted)?;
    fs::create_dir_all(&args.out_dir)?;
    let grids = (0..reference.len())
        .into_par_iter()
        .map(|i| metric_grids(&reference, &distorted, i))
        .collect::<Result<Vec<_>>>()?;
    let mut sums = [0.0; 3];
    let mut n = 0usize;
    for (i, frame) in grids.iter().enumerate() {
        for (k, m) in frame.iter().enumerate() {
            let mut out = create(&args.out_dir.join(frame_name(m.kind.name(), i, "ft01")))?;
            write_tensor(&metric_tensor(m)?, &mut out)?;
            out.flush()?;
            sums[k] += m.grid.cells().iter().sum::<f64>();
        }
        n += frame[0].grid.len();
    }
    for (kind, s) in [MetricKind::PsnrDb, MetricKind::Ssim, MetricKind::Vif].iter().zip(sums) {
        println!("{} mean {:.4}", kind.name(), s / n.max(1) as f64);
    }
    Ok(())
}

fn read_metrics(dir: &Path, i: usize) -> Result<Vec<MetricGrid>> {
    [MetricKind::PsnrDb, MetricKind::Ssim, MetricKind::Vif]
        .into_iter()
        .map(|kind| {
            let t = load_tensor(&dir.join(frame_name(kind.name(), i, "ft01")))?;
            ensure!(t.channels == 1, "{} tensor for frame {i} has {} channels", kind.name(), t.channels);
            Ok(MetricGrid { kind, grid: MacroblockGrid::new(t.rows, t.cols, t.channel_plane(0))? })
        })
        .collect()
}

pub fn features(args: &FeaturesArgs) -> Result<()> {
    let sel = selection(&args.families);
    sel.validate()?;
    let video = load_video(&args.video)?;
    let distorted = args.distorted.as_deref().map(load_video).transpose()?;
    if let Some(d) = &distorted {
        same_length(&video, d)?;
    }
    if sel.quality_metrics && distorted.is_none() && args.metrics_dir.is_none() {
        bail!("the quality_metrics family needs --distorted or --metrics-dir");
    }
    let external_dir = || args.external_dir.as_deref().context("external feature families need --external-dir");
    let external = |on: bool, name: &str, i: usize| -> Result<Option<FeatureTensor>> {
        if on {
            Ok(Some(load_tensor(&external_dir()?.join(frame_name(name, i, "ft01")))?))
        } else {
            Ok(None)
        }
    };
    let stacks = (0..video.len())
        .into_par_iter()
        .map(|i| {
            let internal = frame_features(&video, i, &sel, args.flow_radius)?;
            let metrics = match (sel.quality_metrics, &distorted, &args.metrics_dir) {
                (false, _, _) => Vec::new(),
                (true, Some(d), _) => metric_grids(&video, d, i)?,
                (true, None, Some(dir)) => read_metrics(dir, i)?,
                (true, None, None) => unreachable!("checked above"),
            };
            let ext = ExternalTensors {
                saliency: external(sel.saliency, "saliency", i)?,
                segmentation: external(sel.segmentation, "segmentation", i)?,
                embeddings: external(sel.embeddings, "embeddings", i)?,
            };
            assemble(&internal, &ext, &metrics, &sel, args.embedding_channels)
                .with_context(|| format!("assembling features for frame {i}"))
        })
        .collect::<Result<Vec<_>>>()?;

    fs::create_dir_all(&args.out_dir)?;
    for (i, stack) in stacks.iter().enumerate() {
        let mut out = create(&args.out_dir.join(frame_name("frame", i, "ft01")))?;
        write_tensor(&stack.to_tensor()?, &mut out)?;
        out.flush()?;
    }
    fs::write(args.out_dir.join("layout.txt"), stacks[0].layout_text())?;
    println!(
        "wrote {} stacks of {}x{}x{} to {}",
        stacks.len(),
        stacks[0].rows,
        stacks[0].cols,
        stacks[0].channel_count(),
        args.out_dir.display()
    );
    Ok(())
}

/// Feature stacks of a `pim features` directory, in frame order.
fn read_stacks(dir: &Path) -> Result<Vec<(PathBuf, FeatureStack)>> {
    let layout_path = dir.join("layout.txt");
    let layout = parse_layout(&fs::read_to_string(&layout_path).with_context(|| format!("reading {}", layout_path.display()))?)?;
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e == "ft01") && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("frame_")));
    files.sort();
    ensure!(!files.is_empty(), "no frame_*.ft01 stacks in {}", dir.display());
    files
        .into_iter()
        .map(|p| {
            let stack = FeatureStack::from_tensor(&load_tensor(&p)?, layout.clone())
                .with_context(|| format!("{} does not match layout.txt", p.display()))?;
            Ok((p, stack))
        })
        .collect()
}

pub fn train(args: &TrainArgs) -> Result<()> {
    ensure!(
        args.features_dir.len() == args.targets_dir.len(),
        "give one --targets-dir per --features-dir"
    );
    let mut dataset = Vec::new();
    for (fdir, tdir) in args.features_dir.iter().zip(&args.targets_dir) {
        for (path, stack) in read_stacks(fdir)? {
            let stem = path.file_stem().expect("listed file").to_string_lossy().into_owned();
            let map = load_map(&tdir.join(format!("{stem}.pgm")))?;
            let grid = if (map.width(), map.height()) == (stack.cols, stack.rows) {
                map.values().iter().map(|&v| f64::from(v)).collect::<Vec<_>>()
            } else {
                pool_to_grid(&map, map.width(), map.height())?.into_cells()
            };
            ensure!(
                grid.len() == stack.rows * stack.cols,
                "target {stem} does not cover the {}x{} feature grid",
                stack.rows,
                stack.cols
            );
            let targets = quantize_classes(&MacroblockGrid::new(stack.rows, stack.cols, grid)?);
            dataset.push((stack, targets));
        }
    }
    let class_weights = args.class_weights.as_ref().map(|w| [w[0], w[1], w[2]]);
    let cfg = TrainConfig {
        epochs: args.epochs,
        iterations_per_epoch: args.iterations,
        learning_rate: args.lr,
        dropout: args.dropout,
        seed: args.seed,
        class_weights,
        ..TrainConfig::default()
    };
    let (weights, _) = train_with(&dataset, &cfg, |r| println!("{r}"))?;
    let mut out = create(&args.out)?;
    save_weights(&weights, &mut out)?;
    out.flush()?;
    println!(
        "trained on {} frames; {} parameters saved to {}",
        dataset.len(),
        weights.trainable_count(),
        args.out.display()
    );
    Ok(())
}

/// Each pixel takes its macroblock's value.
fn upsample(grid: &MacroblockGrid<u8>, w: usize, h: usize) -> Result<ImportanceMap> {
    let values = (0..h).flat_map(|y| (0..w).map(move |x| *grid.get(y / MB_SIZE, x / MB_SIZE))).collect();
    Ok(ImportanceMap::new(w, h, values)?)
}

pub fn predict(args: &PredictArgs) -> Result<()> {
    let video = load_video(&args.video)?;
    let (w, h) = video.dims().context("video has no frames")?;
    let (rows, cols) = grid_dims(w, h);
    let stacks = read_stacks(&args.features_dir)?;
    ensure!(stacks.len() == video.len(), "{} feature stacks for {} frames", stacks.len(), video.len());
    if let Some((p, s)) = stacks.iter().find(|(_, s)| (s.rows, s.cols) != (rows, cols)) {
        bail!("{} is {}x{}, the video grid is {rows}x{cols}", p.display(), s.rows, s.cols);
    }
    let weights = load_weights(BufReader::new(File::open(&args.weights).with_context(|| format!("opening {}", args.weights.display()))?), None)?;
    let cfg = args.solver.config();
    let results = stacks
        .par_iter()
        .map(|(_, x)| {
            let map = predict_map(&weights, x)?;
            let solved = solve_dqp(&map.map(|&v| f64::from(v)), &cfg)?;
            Ok((map, solved))
        })
        .collect::<Result<Vec<_>>>()?;

    fs::create_dir_all(&args.out_dir)?;
    let mut values = Vec::with_capacity(results.len() * rows * cols);
    for (i, (map, (dqp, report))) in results.iter().enumerate() {
        let mut out = create(&args.out_dir.join(frame_name("map", i, "pgm")))?;
        save_pgm(&upsample(map, w, h)?, &mut out)?;
        out.flush()?;
        values.extend_from_slice(dqp.cells());
        println!("frame {i}: offset {:.4} rounded {:.4}", report.offset, report.rounded_ratio);
    }
    let mut out = create(&args.out_dir.join("predicted.dqp"))?;
    write_dqp(&DqpSidecar::new(results.len(), rows, cols, values)?, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn mock_encode_cmd(args: &MockEncodeArgs) -> Result<()> {
    let video = load_video(&args.video)?;
    let dqp = read_dqp(BufReader::new(File::open(&args.dqp).with_context(|| format!("opening {}", args.dqp.display()))?))?;
    let job = EncodeJob {
        video,
        dqp,
        target_bitrate_kbps: args.bitrate,
        qp_base: args.qp_base,
        command_template: args.encoder_template.clone(),
    };
    if job.command_template.is_some() {
        let out = drive_encoder(&job, &args.work_dir)?;
        println!("encoded {}", out.display());
        return Ok(());
    }
    let report = mock_encode(&job, args.base_bits.unwrap_or_else(|| job.default_base_bits_per_mb()))?;
    for (i, bits) in report.frame_bits.iter().enumerate() {
        println!("frame {i}: {bits:.1} bits");
    }
    println!("total_bits {:.1}", report.total_bits);
    println!("clamp_events {}", report.clamp_events);
    println!("ratio {:.4}", report.ratio);
    Ok(())
}

pub fn analyze(args: &AnalyzeArgs) -> Result<()> {
    let text = fs::read_to_string(&args.tallies).with_context(|| format!("reading {}", args.tallies.display()))?;
    let method = match args.method {
        MethodArg::Wald => IntervalMethod::Wald,
        MethodArg::Wilson => IntervalMethod::Wilson,
    };
    let d = dataset_summary(&parse_tallies(&text)?, method)?;
    for (id, s) in &d.per_video {
        println!("{id}: n {} fraction {:.4} ± {:.4} preference {}", s.n, s.fraction, s.halfwidth, s.preference);
    }
    println!("preferred videos {}/{} ({:.4})", d.preferred_videos, d.per_video.len(), d.video_fraction);
    let p = &d.pooled;
    println!("pooled: n {} fraction {:.4} ± {:.4} preference {}", p.n, p.fraction, p.halfwidth, p.preference);
    Ok(())
}

pub fn serve(args: &ServeArgs) -> Result<()> {
    let mut cfg = pim_service::ServiceConfig::new(&args.videos, &args.store);
    cfg.preview.solver = args.solver.config();
    cfg.preview.target_bitrate_kbps = args.bitrate;
    cfg.preview.qp_base = args.qp_base;
    cfg.encoder_template = args.encoder_template.clone();
    cfg.shuffle_seed = args.shuffle_seed;
    if let Some(t) = &cfg.encoder_template {
        pim_core::encode::validate_template(t)?;
    }
    let _ = tracing_subscriber::fmt().try_init();
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(pim_service::serve(cfg, args.addr))?;
    Ok(())
}
