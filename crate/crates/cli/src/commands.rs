use std::fmt;
use std::fs;
use std::path::Path;

use flowkit::fields::{flow_normalize, inverse_warp};
use flowkit::io;
use flowkit::losses::{epe, fl_outliers, pixel_loss, scale_loss, smoothness_loss, ssim_loss};
use flowkit::occlusion::occlusion_masks;
use flowkit::propagate::{cross_entropy_map, joint_propagate, miou, relaxed_loss};
use flowkit::sampling::{class_uniform_crops, mdmm, rts_indices, stdn};
use flowkit::solver::{solve_bidirectional, solve_flow, SolveResult};
use flowkit::url::{fit, DataMatrix, Projections};
use flowkit::viz::flow_to_color;
use flowkit::{Error, Image};
use nalgebra::{DMatrix, DVector};

use crate::config::RunConfig;
use crate::{Command, MetricArgs, SolveArgs};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(Error::InvalidArgument(_) | Error::Shape { .. }) => 1,
            CliError::Core(Error::Io { .. } | Error::Format { .. }) => 2,
            CliError::Core(Error::Numeric(_)) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

type Lines = Vec<(String, String)>;

fn line(k: &str, v: impl ToString) -> (String, String) {
    (k.to_string(), v.to_string())
}

fn joined<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Core(Error::Io { path: path.to_path_buf(), source: e }))
}

pub fn execute(command: Command, cfg: &RunConfig) -> Result<Lines, CliError> {
    match command {
        Command::Warp { image, flow, out } => {
            let rec = inverse_warp(&io::read_image(&image)?, &io::read_flo(&flow)?)?;
            io::write_image(&out, &rec)?;
            Ok(vec![line("pixels", rec.pixel_count())])
        }
        Command::Propagate {
            image,
            labels,
            flow,
            out_image,
            out_labels,
        } => {
            let (img, lab) = joint_propagate(
                &io::read_image(&image)?,
                &io::read_labels(&labels, None)?,
                &io::read_flo(&flow)?,
            )?;
            io::write_image(&out_image, &img)?;
            io::write_labels(&out_labels, &lab)?;
            let void = lab.ids().iter().filter(|&&i| i == flowkit::VOID).count();
            Ok(vec![line("void_fraction", void as f64 / lab.ids().len() as f64)])
        }
        Command::Loss {
            i1,
            i2,
            flow,
            ssim,
            smooth_order,
        } => {
            let w = &cfg.weights;
            w.validate()?;
            let (a, b, f) = (io::read_image(&i1)?, io::read_image(&i2)?, io::read_flo(&flow)?);
            let (pixel, _) = pixel_loss(&a, &b, &f, w)?;
            let (smooth, _) = smoothness_loss(&f, w, smooth_order)?;
            let s = if ssim { ssim_loss(&a, &inverse_warp(&b, &f)?)?.0 } else { 0.0 };
            let mut report = scale_loss(pixel, smooth, s, w);
            if !ssim {
                report.terms.retain(|t| t.name != "ssim");
                report = flowkit::LossReport::from_terms(report.terms);
            }
            if !report.total.is_finite() {
                return Err(Error::Numeric(format!("loss is {}", report.total)).into());
            }
            let mut out: Lines = report
                .terms
                .iter()
                .flat_map(|t| [line(&t.name, t.raw), line(&format!("{}_weight", t.name), t.weight)])
                .collect();
            out.push(line("total", report.total));
            Ok(out)
        }
        Command::Occlusion {
            forward,
            backward,
            out_forward,
            out_backward,
        } => {
            let s = &cfg.solver;
            let (of, ob) = occlusion_masks(
                &io::read_flo(&forward)?,
                &io::read_flo(&backward)?,
                s.occlusion_alpha1,
                s.occlusion_alpha2,
            )?;
            if let Some(p) = out_forward {
                io::write_mask(&p, &of)?;
            }
            if let Some(p) = out_backward {
                io::write_mask(&p, &ob)?;
            }
            Ok(vec![
                line("occluded_forward", of.fraction()),
                line("occluded_backward", ob.fraction()),
            ])
        }
        Command::Solve(args) => solve(args, cfg),
        Command::Epe(args) => metric(args, "epe"),
        Command::Fl(args) => metric(args, "fl"),
        Command::Miou { pred, gt, classes } => {
            let r = miou(&io::read_labels(&pred, None)?, &io::read_labels(&gt, None)?, classes)?;
            let mut out: Lines = r
                .per_class
                .iter()
                .enumerate()
                .filter_map(|(c, v)| v.map(|v| line(&format!("iou_{c}"), v)))
                .collect();
            out.push(line("miou", r.mean));
            Ok(out)
        }
        Command::RelaxLoss { logits, labels } => {
            let l = io::read_logits(&logits)?;
            let gt = io::read_labels(&labels, Some(l.classes()))?;
            let (relaxed, _) = relaxed_loss(&l, &gt, cfg.window)?;
            let ce: Vec<f64> = cross_entropy_map(&l, &gt)?.into_iter().flatten().collect();
            Ok(vec![
                line("relaxed", relaxed),
                line("cross_entropy", ce.iter().sum::<f64>() / ce.len() as f64),
            ])
        }
        Command::Flow2ppm { flow, out, max_mag } => {
            let img = flow_to_color(&io::read_flo(&flow)?, max_mag)?;
            io::write_image(&out, &img)?;
            Ok(vec![line("pixels", img.pixel_count())])
        }
        Command::Flownorm { flow, out_u, out_v } => {
            let q = flow_normalize(&io::read_flo(&flow)?, cfg.flow_cap)?;
            for (c, path) in [(0, &out_u), (1, &out_v)] {
                io::write_pnm(
                    path,
                    &io::Pnm {
                        width: q.width,
                        height: q.height,
                        channels: 1,
                        maxval: 255,
                        samples: q.channel(c).into_iter().map(u16::from).collect(),
                    },
                )?;
            }
            Ok(vec![line("cap", cfg.flow_cap)])
        }
        Command::SampleRts { frames, n, max_stride } => {
            let idx = rts_indices(frames, n, max_stride, cfg.seed)?;
            Ok(vec![line("indices", joined(&idx))])
        }
        Command::ClassCrops {
            labels,
            crop,
            classes,
            count,
            out,
        } => {
            let maps = labels
                .iter()
                .map(|p| io::read_labels(p, Some(classes)))
                .collect::<Result<Vec<_>, _>>()?;
            let plan = class_uniform_crops(&maps, crop, classes, count, cfg.seed)?;
            if plan.no_class_present {
                eprintln!("warning: no class present; all crops are random");
            }
            io::write_crops_csv(&out, &plan.crops)?;
            Ok(vec![
                line("crops", plan.crops.len()),
                line("no_class_present", u8::from(plan.no_class_present)),
            ])
        }
        Command::Stdn { input, window, output } => {
            let r = stdn(&io::read_depth_dir(&input)?, window)?;
            for (f, t) in &r.unscaled {
                eprintln!("warning: frame {f} third {t} has zero percentile; left unscaled");
            }
            io::write_depth_dir(&output, &r.clip)?;
            Ok(vec![line("frames", r.clip.len()), line("unscaled", r.unscaled.len())])
        }
        Command::Mdmm { input, start, n, out } => {
            let m = mdmm(&io::read_depth_dir(&input)?, start, n)?;
            io::write_depth(&out, &m)?;
            Ok(vec![
                line("max", m.data().iter().copied().fold(0.0, f64::max)),
                line("mean", m.data().iter().sum::<f64>() / m.data().len() as f64),
            ])
        }
        Command::UrlFit { a, b, d, eta, out } => {
            let (a, b) = read_pair(&a, &b)?;
            let f = fit(&a, &b, d, eta, &cfg.fit_options())?;
            io::save_factorization(&out, &f)?;
            let (ra, rb) = f.relative_residuals(&a, &b);
            Ok(vec![
                line("iterations", f.iterations()),
                line("objective", f.objective_trace.last().copied().unwrap_or(f64::NAN)),
                line("residual_a", ra),
                line("residual_b", rb),
            ])
        }
        Command::UrlProject { model, a, b } => {
            let f = io::load_factorization(&model)?;
            let (a, b) = read_pair(&a, &b)?;
            let p = Projections::fit(&a, &b, &f)?;
            if p.rank_deficient {
                eprintln!("warning: rank-deficient alignment; some projection rows are arbitrary");
            }
            io::write_matrix_csv(&model.join("PA.csv"), &p.pa)?;
            io::write_matrix_csv(&model.join("PB.csv"), &p.pb)?;
            let orth = |m: &DMatrix<f64>| (m * m.transpose() - DMatrix::identity(m.nrows(), m.nrows())).amax();
            Ok(vec![
                line("orthogonality_error", orth(&p.pa).max(orth(&p.pb))),
                line("rank_deficient", u8::from(p.rank_deficient)),
            ])
        }
        Command::UrlPredict {
            model,
            test,
            semantic,
            truth,
            out,
        } => {
            let p = Projections {
                pa: io::read_matrix_csv(&model.join("PA.csv"))?,
                pb: io::read_matrix_csv(&model.join("PB.csv"))?,
                rank_deficient: false,
            };
            let protos = p.prototypes(&io::read_matrix_csv(&semantic)?)?;
            let test = io::read_matrix_csv(&test)?;
            let preds = test
                .column_iter()
                .map(|c| p.predict(&DVector::from_column_slice(c.as_slice()), &protos))
                .collect::<Result<Vec<_>, _>>()?;
            if let Some(path) = out {
                write_text(&path, &format!("{}\n", joined(&preds)))?;
            }
            let mut lines = vec![line("predictions", joined(&preds))];
            if let Some(path) = truth {
                let t = io::read_matrix_csv(&path)?;
                if t.len() != preds.len() {
                    return Err(Error::Shape {
                        expected: format!("{} labels", preds.len()),
                        actual: t.len().to_string(),
                    }
                    .into());
                }
                let hits = preds.iter().zip(t.iter()).filter(|(&p, &t)| p as f64 == t).count();
                lines.push(line("accuracy", hits as f64 / preds.len() as f64));
            }
            Ok(lines)
        }
    }
}

fn read_pair(a: &Path, b: &Path) -> Result<(DataMatrix, DataMatrix), CliError> {
    Ok((
        DataMatrix::new(io::read_matrix_csv(a)?)?,
        DataMatrix::new(io::read_matrix_csv(b)?)?,
    ))
}

fn metric(args: MetricArgs, which: &str) -> Result<Lines, CliError> {
    let flow = io::read_flo(&args.flow)?;
    let gt = io::read_flo(&args.gt)?;
    let valid = args.valid.as_deref().map(io::read_mask).transpose()?;
    let v = match which {
        "epe" => epe(&flow, &gt, valid.as_ref())?,
        _ => fl_outliers(&flow, &gt, valid.as_ref())?,
    };
    Ok(vec![line(which, v)])
}

fn trace_csv(r: &SolveResult) -> String {
    let mut out = String::from("iter,total,pixel,smooth,ssim\n");
    for t in &r.loss_trace {
        out.push_str(&format!("{},{},{},{},{}\n", t.iter, t.total, t.pixel, t.smooth, t.ssim));
    }
    out
}

fn solve(args: SolveArgs, cfg: &RunConfig) -> Result<Lines, CliError> {
    let i1: Image = io::read_image(&args.i1)?;
    let i2: Image = io::read_image(&args.i2)?;
    let gt = args.gt.as_deref().map(io::read_flo).transpose()?;
    let bidirectional = cfg.solver.bidirectional || args.out_backward.is_some() || args.out_occlusion.is_some();
    let mut lines = Vec::new();
    let forward = if bidirectional {
        let b = solve_bidirectional(&i1, &i2, &cfg.solver)?;
        if let Some(p) = &args.out_backward {
            io::write_flo(p, &b.backward.flow)?;
        }
        if let Some(p) = &args.out_occlusion {
            io::write_mask(p, &b.forward_occlusion)?;
        }
        lines.push(line("occluded_forward", b.forward_occlusion.fraction()));
        lines.push(line("occluded_backward", b.backward_occlusion.fraction()));
        b.forward
    } else {
        solve_flow(&i1, &i2, &cfg.solver)?
    };
    let forward = match &gt {
        Some(g) => forward.with_ground_truth(g)?,
        None => forward,
    };
    io::write_flo(&args.out, &forward.flow)?;
    if let Some(p) = &args.trace {
        write_text(p, &trace_csv(&forward))?;
    }
    let last = forward.loss_trace.last().copied();
    lines.insert(0, line("levels", forward.level_traces.len()));
    lines.insert(1, line("iterations", forward.loss_trace.len().saturating_sub(1)));
    if let Some(t) = last {
        lines.insert(2, line("total", t.total));
    }
    if let Some(e) = forward.epe {
        lines.push(line("epe", e));
    }
    Ok(lines)
}
