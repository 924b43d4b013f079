//! Command implementations behind the `attnatlas` binary.
//!
//! Every command writes into an output directory. Files are registered as
//! they are created and removed again if the command fails part way.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::haar::{build_tree_haar, expand_bihaar, expand_trihaar, l1_entropy, top_by_support, TreeHaarBasis};
use crate::paraproduct::{decompose_softmax, softmax_rows, GridFunction2D};
use crate::questionnaire::{organize2d, organize3d, QuestionnaireConfig};
use crate::tensor_io::{self, crop_pow2_anchored, CropAnchor, Tensor3, TensorMeta};
use crate::tree::{build_dyadic_tree, PartitionTree};
use crate::tree_metric::{EmdConfig, TensorAxis};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const DEFAULT_BIHAAR_M: usize = 400;
pub const DEFAULT_TRIHAAR_M: usize = 100;
pub const DEFAULT_FRACTION: f64 = 0.10;

/// Tracks files written by a command and deletes them unless committed.
struct Outputs {
    dir: PathBuf,
    created_dir: bool,
    files: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        let created_dir = !dir.exists();
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            created_dir,
            files: Vec::new(),
            committed: false,
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.files.push(p.clone());
        p
    }

    fn text(&mut self, name: &str, contents: &str) -> Result<()> {
        let p = self.path(name);
        fs::write(p, contents)?;
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.text(name, &s)
    }

    fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for f in &self.files {
            let _ = fs::remove_file(f);
        }
        if self.created_dir {
            let _ = fs::remove_dir(&self.dir);
        }
    }
}

fn dims_string(dims: &[usize]) -> String {
    dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

fn axis_tag(axis: TensorAxis) -> &'static str {
    match axis {
        TensorAxis::Query => "q",
        TensorAxis::Key => "k",
        TensorAxis::Head => "h",
    }
}

#[derive(Debug, Clone)]
pub struct OrganizeArgs {
    pub input: PathBuf,
    pub out_dir: PathBuf,
    pub iters: usize,
    pub seed: u64,
    pub beta: f64,
}

#[derive(Serialize)]
struct OrganizeSummary<'a> {
    tool: &'static str,
    version: &'static str,
    input_dims: [usize; 3],
    iterations: usize,
    seed: u64,
    beta: f64,
    query_order: &'a [usize],
    key_order: &'a [usize],
    head_order: &'a [usize],
    degenerate_updates: Vec<(usize, &'static str)>,
}

/// Runs the tensor organization and writes its geometry.
pub fn cmd_organize(args: &OrganizeArgs) -> Result<()> {
    let (x, meta) = tensor_io::load_tensor(&args.input)?;
    let cfg = QuestionnaireConfig {
        n_iters: args.iters,
        emd_config: EmdConfig {
            beta: args.beta,
            ..Default::default()
        },
        seed: args.seed,
        ..Default::default()
    };
    info!("organizing {} tensor, {} iterations", dims_string(&[x.n_q(), x.n_k(), x.n_h()]), cfg.n_iters);
    let r = organize3d(&x, &cfg)?;
    let organized = r.organize(&x)?;
    let [q, k, h] = r.permutations();
    let organized_meta = TensorMeta {
        layer_head_map: h.iter().map(|&i| meta.layer_head_map[i]).collect(),
        ..meta
    };

    let mut out = Outputs::new(&args.out_dir)?;
    let p = out.path("organized.npy");
    out.files.push(tensor_io::sidecar_path(&p));
    tensor_io::save_tensor(&p, &organized, Some(&organized_meta))?;
    for axis in [TensorAxis::Query, TensorAxis::Key, TensorAxis::Head] {
        let geo = r.geometry(axis);
        let tag = axis_tag(axis);
        out.json(&format!("tree_{tag}.json"), &geo.tree)?;
        let p = out.path(&format!("affinity_{tag}.npy"));
        tensor_io::write_matrix(&p, geo.affinity.entries.view())?;
        let p = out.path(&format!("embed_{tag}.csv"));
        write_embedding(&p, &geo.embedding.coordinates())?;
    }
    out.json(
        "organize.json",
        &OrganizeSummary {
            tool: "attnatlas organize",
            version: VERSION,
            input_dims: [x.n_q(), x.n_k(), x.n_h()],
            iterations: r.iterations_run,
            seed: args.seed,
            beta: args.beta,
            query_order: &q,
            key_order: &k,
            head_order: &h,
            degenerate_updates: r.degenerate_updates.iter().map(|(i, a)| (*i, a.name())).collect(),
        },
    )?;
    out.commit();
    Ok(())
}

/// First two diffusion coordinates per point, zero-padded.
fn write_embedding(path: &Path, coords: &Array2<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["index", "psi_1", "psi_2"])?;
    for (i, row) in coords.axis_iter(Axis(0)).enumerate() {
        let c = |d: usize| row.get(d).copied().unwrap_or(0.0).to_string();
        w.write_record([i.to_string(), c(0), c(1)])?;
    }
    w.flush()?;
    Ok(())
}

fn read_tree(path: &Path) -> Result<PartitionTree> {
    let f = File::open(path)?;
    Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
}

/// Trees for `axes`: read from `trees_dir` (as written by `organize`) or dyadic.
fn load_trees(x: &Tensor3, trees_dir: Option<&Path>, axes: &[TensorAxis]) -> Result<Vec<PartitionTree>> {
    axes.iter()
        .map(|&axis| {
            let n = axis.len(x);
            let t = match trees_dir {
                Some(dir) => read_tree(&dir.join(format!("tree_{}.json", axis_tag(axis))))?,
                None => build_dyadic_tree(n).map_err(|_| {
                    Error::Shape(format!("{} axis has {n} entries; dyadic trees need a power of two (pass --trees)", axis.name()))
                })?,
            };
            if t.n() != n {
                return Err(Error::Shape(format!("{} tree covers {} indices, tensor axis has {n}", axis.name(), t.n())));
            }
            Ok(t)
        })
        .collect()
}

fn head_labels(x: &Tensor3, input: &Path, heads_per_layer: Option<usize>) -> Result<(Vec<(usize, usize)>, i64)> {
    match tensor_io::read_meta(input)? {
        Some(meta) => {
            meta.validate(x.n_h())?;
            Ok((meta.layer_head_map, meta.batch_id))
        }
        None => {
            let per = heads_per_layer
                .ok_or_else(|| Error::Config("no metadata sidecar; --heads-per-layer is required".into()))?;
            if per == 0 {
                return Err(Error::Config("--heads-per-layer must be positive".into()));
            }
            Ok(((0..x.n_h()).map(|h| (h / per, h % per)).collect(), 0))
        }
    }
}

#[derive(Debug, Clone)]
pub struct EntropyArgs {
    pub input: PathBuf,
    pub trees: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub top_m: usize,
    pub heads_per_layer: Option<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadEntropy {
    pub head: usize,
    pub layer: usize,
    pub head_in_layer: usize,
    pub l1_entropy: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadEntropyReport {
    pub dims: [usize; 3],
    pub batch_id: i64,
    pub top_m: usize,
    pub seed: u64,
    pub rows: Vec<HeadEntropy>,
}

impl HeadEntropyReport {
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# attnatlas {VERSION} entropy")?;
        writeln!(
            w,
            "# dims={} top_m={} batch_id={} seed={}",
            dims_string(&self.dims),
            self.top_m,
            self.batch_id,
            self.seed
        )?;
        let mut cw = csv::Writer::from_writer(w);
        for r in &self.rows {
            cw.serialize(r)?;
        }
        cw.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut fields = BTreeMap::new();
        for line in text.lines().filter_map(|l| l.strip_prefix("# ")) {
            for kv in line.split_whitespace() {
                if let Some((k, v)) = kv.split_once('=') {
                    fields.insert(k.to_string(), v.to_string());
                }
            }
        }
        let bad = |k: &str| Error::Format(format!("{}: missing or malformed '{k}' in report header", path.display()));
        let get = |k: &str| fields.get(k).ok_or_else(|| bad(k));
        let dims: Vec<usize> = get("dims")?
            .split('x')
            .map(|d| d.parse().map_err(|_| bad("dims")))
            .collect::<Result<_>>()?;
        let dims: [usize; 3] = dims.try_into().map_err(|_| bad("dims"))?;
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
        let rows = rdr.deserialize().collect::<std::result::Result<Vec<HeadEntropy>, _>>()?;
        if rows.len() != dims[2] {
            return Err(Error::Format(format!("{}: {} rows for {} heads", path.display(), rows.len(), dims[2])));
        }
        Ok(Self {
            dims,
            batch_id: get("batch_id")?.parse().map_err(|_| bad("batch_id"))?,
            top_m: get("top_m")?.parse().map_err(|_| bad("top_m"))?,
            seed: get("seed")?.parse().map_err(|_| bad("seed"))?,
            rows,
        })
    }
}

/// Rank 1 goes to the largest value; ties go to the lower index.
fn ranks_descending(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut ranks = vec![0; values.len()];
    for (r, &i) in order.iter().enumerate() {
        ranks[i] = r + 1;
    }
    ranks
}

/// Bi-Haar entropy of every head slice.
pub fn head_entropies(x: &Tensor3, bq: &TreeHaarBasis, bk: &TreeHaarBasis, top_m: usize) -> Result<Vec<f64>> {
    (0..x.n_h())
        .into_par_iter()
        .map(|h| {
            let cs = expand_bihaar(x.data().index_axis(Axis(2), h), bq, bk)?;
            l1_entropy(&cs, top_m)
        })
        .collect()
}

pub fn entropy_report(args: &EntropyArgs) -> Result<HeadEntropyReport> {
    let (x, _) = tensor_io::load_tensor(&args.input)?;
    let (labels, batch_id) = head_labels(&x, &args.input, args.heads_per_layer)?;
    let trees = load_trees(&x, args.trees.as_deref(), &[TensorAxis::Query, TensorAxis::Key])?;
    let bq = build_tree_haar(&trees[0])?;
    let bk = build_tree_haar(&trees[1])?;
    let entropies = head_entropies(&x, &bq, &bk, args.top_m)?;
    let ranks = ranks_descending(&entropies);
    let rows = entropies
        .iter()
        .enumerate()
        .map(|(h, &e)| HeadEntropy {
            head: h,
            layer: labels[h].0,
            head_in_layer: labels[h].1,
            l1_entropy: e,
            rank: ranks[h],
        })
        .collect();
    Ok(HeadEntropyReport {
        dims: [x.n_q(), x.n_k(), x.n_h()],
        batch_id,
        top_m: args.top_m,
        seed: args.seed,
        rows,
    })
}

pub fn cmd_entropy(args: &EntropyArgs) -> Result<()> {
    let report = entropy_report(args)?;
    let mut out = Outputs::new(&args.out_dir)?;
    let p = out.path("entropy.csv");
    report.write(BufWriter::new(File::create(p)?))?;
    out.commit();
    Ok(())
}

#[derive(Debug, Clone)]
pub struct RankArgs {
    pub reports: Vec<PathBuf>,
    pub out_dir: PathBuf,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSets {
    pub batch_id: i64,
    pub source: String,
    pub top: Vec<(usize, usize)>,
    pub bottom: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadCount {
    pub layer: usize,
    pub head: usize,
    pub top_count: usize,
    pub bottom_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingSummary {
    pub version: String,
    pub top_fraction: f64,
    pub heads_per_set: usize,
    pub batches: Vec<BatchSets>,
    pub counts: Vec<HeadCount>,
    pub most_top: Vec<HeadCount>,
    pub most_bottom: Vec<HeadCount>,
}

pub fn rank_heads(reports: &[(String, HeadEntropyReport)], fraction: f64) -> Result<RankingSummary> {
    let Some((_, first)) = reports.first() else {
        return Err(Error::Config("at least one entropy report is required".into()));
    };
    let n_h = first.rows.len();
    if let Some((name, r)) = reports.iter().find(|(_, r)| r.rows.len() != n_h) {
        return Err(Error::Shape(format!("{name} has {} heads, expected {n_h}", r.rows.len())));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction must lie in (0, 1], got {fraction}")));
    }
    let k = (fraction * n_h as f64).ceil() as usize;
    if 2 * k > n_h {
        return Err(Error::Config(format!(
            "fraction {fraction} selects {k} of {n_h} heads for each set; top and bottom sets would overlap"
        )));
    }

    let mut counts: BTreeMap<(usize, usize), HeadCount> = BTreeMap::new();
    for r in &first.rows {
        counts.insert((r.layer, r.head_in_layer), HeadCount { layer: r.layer, head: r.head_in_layer, top_count: 0, bottom_count: 0 });
    }
    let mut batches = Vec::new();
    for (name, rep) in reports {
        let mut by_rank: Vec<&HeadEntropy> = rep.rows.iter().collect();
        by_rank.sort_by_key(|r| r.rank);
        let label = |r: &&HeadEntropy| (r.layer, r.head_in_layer);
        let top: Vec<_> = by_rank[..k].iter().map(label).collect();
        let bottom: Vec<_> = by_rank[n_h - k..].iter().rev().map(label).collect();
        for l in &top {
            counts
                .entry(*l)
                .or_insert(HeadCount { layer: l.0, head: l.1, top_count: 0, bottom_count: 0 })
                .top_count += 1;
        }
        for l in &bottom {
            counts
                .entry(*l)
                .or_insert(HeadCount { layer: l.0, head: l.1, top_count: 0, bottom_count: 0 })
                .bottom_count += 1;
        }
        batches.push(BatchSets {
            batch_id: rep.batch_id,
            source: name.clone(),
            top,
            bottom,
        });
    }
    let counts: Vec<HeadCount> = counts.into_values().collect();
    let leaders = |key: fn(&HeadCount) -> usize| {
        let mut v: Vec<HeadCount> = counts.iter().filter(|c| key(c) > 0).cloned().collect();
        v.sort_by(|a, b| key(b).cmp(&key(a)).then((a.layer, a.head).cmp(&(b.layer, b.head))));
        v.truncate(3);
        v
    };
    Ok(RankingSummary {
        version: VERSION.into(),
        top_fraction: fraction,
        heads_per_set: k,
        most_top: leaders(|c| c.top_count),
        most_bottom: leaders(|c| c.bottom_count),
        batches,
        counts,
    })
}

pub fn cmd_rank_heads(args: &RankArgs) -> Result<RankingSummary> {
    let reports = args
        .reports
        .iter()
        .map(|p| Ok((p.display().to_string(), HeadEntropyReport::read(p)?)))
        .collect::<Result<Vec<_>>>()?;
    let summary = rank_heads(&reports, args.fraction)?;
    let mut out = Outputs::new(&args.out_dir)?;
    let p = out.path("ranking.csv");
    let mut f = BufWriter::new(File::create(p)?);
    writeln!(f, "# attnatlas {VERSION} rank-heads")?;
    writeln!(f, "# batches={} fraction={} heads_per_set={}", reports.len(), args.fraction, summary.heads_per_set)?;
    let mut w = csv::Writer::from_writer(f);
    for c in &summary.counts {
        w.serialize(c)?;
    }
    w.flush()?;
    drop(w);
    out.json("ranking.json", &summary)?;
    out.commit();
    Ok(summary)
}

#[derive(Debug, Clone)]
pub struct NetworkEntropyArgs {
    pub input: PathBuf,
    pub trees: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub top_m: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct NetworkEntropy {
    pub tool: String,
    pub version: String,
    pub dims: [usize; 3],
    pub top_m: usize,
    pub seed: u64,
    pub l1_entropy: f64,
}

pub fn cmd_network_entropy(args: &NetworkEntropyArgs) -> Result<NetworkEntropy> {
    let (x, _) = tensor_io::load_tensor(&args.input)?;
    let trees = load_trees(&x, args.trees.as_deref(), &[TensorAxis::Query, TensorAxis::Key, TensorAxis::Head])?;
    let bases = trees.iter().map(build_tree_haar).collect::<Result<Vec<_>>>()?;
    let cs = expand_trihaar(&x, &bases[0], &bases[1], &bases[2])?;
    let top = top_by_support(&cs, args.top_m)?;
    let result = NetworkEntropy {
        tool: "attnatlas network-entropy".into(),
        version: VERSION.into(),
        dims: [x.n_q(), x.n_k(), x.n_h()],
        top_m: args.top_m,
        seed: args.seed,
        l1_entropy: top.entries().iter().map(|c| c.value.abs()).sum(),
    };
    let mut out = Outputs::new(&args.out_dir)?;
    out.json("network_entropy.json", &result)?;
    let p = out.path("coefficients.csv");
    top.write_csv(BufWriter::new(File::create(p)?))?;
    out.commit();
    Ok(result)
}

#[derive(Debug, Clone)]
pub struct DecomposeArgs {
    pub input: PathBuf,
    /// Head to take when the input is a 3-tensor.
    pub head: Option<usize>,
    pub out_dir: PathBuf,
    /// Number of scales on each axis; defaults to the full grid depth.
    pub depth: Option<usize>,
    pub crop_anchor: CropAnchor,
    pub iters: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DecomposeSummary {
    pub tool: String,
    pub version: String,
    pub input_dims: Vec<usize>,
    pub cropped_to: Option<usize>,
    pub depth: usize,
    pub seed: u64,
    pub max_reassembly_error: f64,
}

fn load_head(args: &DecomposeArgs) -> Result<Array2<f64>> {
    let arr = tensor_io::read_array(&args.input)?;
    match arr.shape.len() {
        2 => tensor_io::read_matrix(&args.input),
        3 => {
            let (x, _) = tensor_io::load_tensor(&args.input)?;
            x.slice_head(args.head.unwrap_or(0))
        }
        d => Err(Error::Format(format!("expected a matrix or a 3-tensor, header declares {d} dims"))),
    }
}

pub fn cmd_decompose(args: &DecomposeArgs) -> Result<DecomposeSummary> {
    let m = load_head(args)?;
    let (r, c) = m.dim();
    if r != c {
        return Err(Error::Shape(format!("decompose needs a square head, got {r} × {c}")));
    }
    let cropped = crop_pow2_anchored(m.view(), args.crop_anchor);
    let cropped_to = (cropped.nrows() != r).then(|| {
        info!("cropped {r}x{c} input to {0}x{0}", cropped.nrows());
        cropped.nrows()
    });
    let cfg = QuestionnaireConfig {
        n_iters: args.iters,
        seed: args.seed,
        ..Default::default()
    };
    let org = organize2d(cropped.view(), &cfg)?;
    let grid = GridFunction2D::new(org.organized.clone())?;
    let depth = args.depth.unwrap_or(grid.depth_x());
    let (d, _) = decompose_softmax(&grid, depth, depth)?;
    let soft = softmax_rows(grid.values());
    let err = (&d.approx + &d.residual - &soft).iter().fold(0.0, |a: f64, v| a.max(v.abs()));
    if err > 1e-10 {
        return Err(Error::numerical(format!("approx + residual deviates from softmax by {err:e}")));
    }

    let summary = DecomposeSummary {
        tool: "attnatlas decompose".into(),
        version: VERSION.into(),
        input_dims: vec![r, c],
        cropped_to,
        depth,
        seed: args.seed,
        max_reassembly_error: err,
    };
    let mut out = Outputs::new(&args.out_dir)?;
    for (name, mat) in [("organized.npy", &org.organized), ("approx.npy", &d.approx), ("residual.npy", &d.residual), ("softmax.npy", &soft)] {
        let p = out.path(name);
        tensor_io::write_matrix(&p, mat.view())?;
    }
    let p = out.path("scales.csv");
    let mut w = csv::Writer::from_path(p)?;
    for s in &d.scale_norms {
        w.serialize(s)?;
    }
    w.flush()?;
    drop(w);
    out.json("decompose.json", &summary)?;
    out.commit();
    Ok(summary)
}
