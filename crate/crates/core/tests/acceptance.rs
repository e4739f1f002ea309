//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any fails.
//!
//! The end-to-end checks share one desk-scale experiment. It runs in a fresh
//! temporary directory unless `ACCEPTANCE_WORKDIR` names a directory to use
//! (and keep) instead. `ACCEPTANCE_ONLY=7,11` runs a subset of the criteria.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tumorlab::model::{roipool, ModelConfig, Network, Task};
use tumorlab::nn::Tensor;
use tumorlab::pipeline::{ablation, run_pipeline, ExperimentConfig, PipelineSummary};
use tumorlab::retrieval::{
    serve, DistortionDraw, DistortionParams, EmbeddingTable, NeighborsResponse, RetrievalIndex,
    ServedNeighbor, TableRow,
};
use tumorlab::training::{
    accumulate_gradients, lr_at, multitask_loss_scaled, TaskLabels, TrainConfig,
};
use tumorlab::viz::{project_table, read_scatter_csv};
use tumorlab::BBox;

type Check = Result<(bool, String), String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- gradients

fn trainable_len(net: &mut Network<f64>) -> usize {
    let mut n = 0;
    net.visit_params(&mut |_, p| {
        if p.trainable {
            n += p.len();
        }
    });
    n
}

fn nudge(net: &mut Network<f64>, index: usize, delta: f64) {
    let mut seen = 0;
    net.visit_params(&mut |_, p| {
        if !p.trainable {
            return;
        }
        if (seen..seen + p.len()).contains(&index) {
            p.value[index - seen] += delta;
        }
        seen += p.len();
    });
}

fn gradient_case(lambda_p: f64) -> Result<(f64, usize), String> {
    let config = ModelConfig {
        channels: 4,
        n_resblocks: 1,
        seed: 11,
        ..ModelConfig::default()
    };
    let mut net = Network::<f64>::new(&config).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let side = 8;
    let data: Vec<f64> = (0..side * side * side)
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    let input = Tensor::from_vec([1, 1, side, side, side], data);
    let boxes = [
        BBox::new([1, 1, 1], [4, 4, 4]).map_err(err)?,
        BBox::new([4, 3, 2], [7, 7, 6]).map_err(err)?,
    ];
    let mut mask = vec![0u8; side * side * side];
    for b in &boxes {
        for z in b.start[0]..b.stop[0] {
            for y in b.start[1]..b.stop[1] {
                for x in b.start[2]..b.stop[2] {
                    mask[(z as usize * side + y as usize) * side + x as usize] = 1;
                }
            }
        }
    }
    let labels = |t: usize, r: usize, lr: usize, fr: usize, ul: usize| -> TaskLabels {
        [
            (Task::Type, Some(t)),
            (Task::Region, Some(r)),
            (Task::LeftRight, Some(lr)),
            (Task::FrontRear, Some(fr)),
            (Task::UpperLower, Some(ul)),
        ]
        .into_iter()
        .collect()
    };
    let tumors = vec![vec![
        (boxes[0], labels(0, 3, 0, 1, 0)),
        (boxes[1], labels(2, 7, 1, 0, 1)),
    ]];
    let masks = vec![mask];
    let lambdas: BTreeMap<Task, f64> = Task::ALL
        .iter()
        .map(|&t| (t, if t == Task::Segmentation { 1.0 } else { lambda_p }))
        .collect();

    net.zero_grad();
    accumulate_gradients(&mut net, &input, &masks, &tumors, &lambdas).map_err(err)?;
    let mut analytic = Vec::new();
    net.visit_params(&mut |_, p| {
        if p.trainable {
            analytic.extend_from_slice(&p.grad);
        }
    });
    let n = trainable_len(&mut net);
    if analytic.len() != n {
        return Err("gradient and parameter counts disagree".into());
    }

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        nudge(&mut net, i, h);
        let plus = accumulate_gradients(&mut net, &input, &masks, &tumors, &lambdas)
            .map_err(err)?
            .total;
        nudge(&mut net, i, -2.0 * h);
        let minus = accumulate_gradients(&mut net, &input, &masks, &tumors, &lambdas)
            .map_err(err)?
            .total;
        nudge(&mut net, i, h);
        let numeric = (plus - minus) / (2.0 * h);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    Ok((worst, n))
}

fn gradient_check() -> Check {
    let mut detail = Vec::new();
    let mut pass = true;
    for lambda_p in [1.0, 1e-3] {
        let (worst, n) = gradient_case(lambda_p)?;
        pass &= worst <= 1e-3;
        detail.push(format!("lambda_p={lambda_p}: max rel err {worst:.2e} over {n} params"));
    }
    Ok((pass, detail.join("; ")))
}

// ------------------------------------------------------------------ roipool

fn roipool_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let random_box = |rng: &mut ChaCha8Rng, dims: [usize; 3]| {
        let mut start = [0i64; 3];
        let mut stop = [0i64; 3];
        for a in 0..3 {
            let lo = rng.gen_range(0..dims[a]);
            let hi = rng.gen_range(lo + 1..=dims[a]);
            start[a] = lo as i64;
            stop[a] = hi as i64;
        }
        BBox::new(start, stop).unwrap()
    };
    let mut monotone_cases = 0;
    for _ in 0..100 {
        let c = rng.gen_range(1..6);
        let dims = [rng.gen_range(1..10), rng.gen_range(1..10), rng.gen_range(1..10)];
        let batch = 2;
        let len = batch * c * dims[0] * dims[1] * dims[2];
        let data: Vec<f32> = (0..len).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let feat = Tensor::from_vec([batch, c, dims[0], dims[1], dims[2]], data);
        let n = rng.gen_range(0..batch);
        let b = random_box(&mut rng, dims);

        let (got, _) = roipool(&feat, n, &b).map_err(err)?;
        let at = |ch: usize, z: i64, y: i64, x: i64| {
            let idx = (((n * c + ch) * dims[0] + z as usize) * dims[1] + y as usize) * dims[2] + x as usize;
            feat.data[idx]
        };
        for ch in 0..c {
            let mut best = f32::NEG_INFINITY;
            for z in b.start[0]..b.stop[0] {
                for y in b.start[1]..b.stop[1] {
                    for x in b.start[2]..b.stop[2] {
                        best = best.max(at(ch, z, y, x));
                    }
                }
            }
            if got[ch] != best {
                return Ok((false, format!("channel {ch} of {b}: {} vs oracle {best}", got[ch])));
            }
        }

        let mut bigger = b;
        for a in 0..3 {
            bigger.start[a] = rng.gen_range(0..=b.start[a]);
            bigger.stop[a] = rng.gen_range(b.stop[a]..=dims[a] as i64);
        }
        let (outer, _) = roipool(&feat, n, &bigger).map_err(err)?;
        if outer.iter().zip(&got).any(|(o, i)| o < i) {
            return Ok((false, format!("{bigger} pools below the nested {b}")));
        }
        monotone_cases += 1;
    }
    Ok((true, format!("100 cases exact, {monotone_cases} nested boxes monotone")))
}

// ----------------------------------------------------------------- omission

fn omission_equivalence() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let classes = |t: Task| match t {
        Task::Type => 3,
        Task::Region => 11,
        _ => 2,
    };
    let lambdas: BTreeMap<Task, f64> = Task::ALL
        .iter()
        .map(|&t| (t, if t == Task::Segmentation { 1.0 } else { 1e-3 * rng.gen_range(0.5..2.0) }))
        .collect();
    let mut worst: f64 = 0.0;
    let mut omitted_terms = 0;
    for _ in 0..200 {
        let voxels = rng.gen_range(1..40);
        let seg: Vec<f64> = (0..voxels).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let target: Vec<u8> = (0..voxels).map(|_| rng.gen_range(0..2)).collect();
        let n_tumors = rng.gen_range(1..5);
        let mut logits = Vec::new();
        let mut full = Vec::new();
        let mut partial = Vec::new();
        let mut scales = Vec::new();
        for _ in 0..n_tumors {
            let mut l = BTreeMap::new();
            let mut f = TaskLabels::new();
            let mut p = TaskLabels::new();
            let mut s = BTreeMap::new();
            for t in Task::CLASSIFICATION {
                let k = classes(t);
                l.insert(t, (0..k).map(|_| rng.gen_range(-3.0..3.0)).collect::<Vec<f64>>());
                let label = rng.gen_range(0..k);
                f.insert(t, Some(label));
                let keep = rng.gen_bool(0.6);
                p.insert(t, keep.then_some(label));
                s.insert(t, if keep { 1.0 } else { 0.0 });
                omitted_terms += usize::from(!keep);
            }
            logits.push(l);
            full.push(f);
            partial.push(p);
            scales.push(s);
        }
        let (a, ga) = multitask_loss_scaled(Some(&seg), &target, &logits, &partial, &lambdas, None)
            .map_err(err)?;
        let (b, gb) =
            multitask_loss_scaled(Some(&seg), &target, &logits, &full, &lambdas, Some(&scales))
                .map_err(err)?;
        worst = worst.max((a.total - b.total).abs());
        for (x, y) in ga.seg.iter().flatten().zip(gb.seg.iter().flatten()) {
            worst = worst.max((x - y).abs());
        }
        for (ta, tb) in ga.tumors.iter().zip(&gb.tumors) {
            for (task, va) in ta {
                let vb = tb.get(task).ok_or("gradient missing for a task")?;
                for (x, y) in va.iter().zip(vb) {
                    worst = worst.max((x - y).abs());
                }
            }
        }
    }
    Ok((
        worst <= 1e-9,
        format!("200 instances, {omitted_terms} omitted terms, max |diff| {worst:.1e}"),
    ))
}

// ----------------------------------------------------------------- schedule

fn schedule() -> Check {
    let cfg = TrainConfig::paper_scale();
    let mut detail = Vec::new();
    let mut pass = true;
    for (epoch, want) in [(0, 0.1), (89, 0.1), (90, 0.01), (104, 0.01), (105, 0.001), (119, 0.001)] {
        let got = lr_at(epoch, &cfg).map_err(err)?;
        pass &= (got - want).abs() <= 1e-12 * want;
        detail.push(format!("{epoch}:{got}"));
    }
    pass &= lr_at(120, &cfg).is_err();
    Ok((pass, detail.join(" ")))
}

// --------------------------------------------------------------- distortion

fn std_dev(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

fn distortion_sampler() -> Check {
    let params = DistortionParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let n = 100_000;
    let side = 1000i64;
    let shape = [1_000_000; 3];
    let clean = BBox::new([500_000 - side / 2; 3], [500_000 + side / 2; 3]).map_err(err)?;
    let mut scale = vec![Vec::with_capacity(n); 3];
    let mut shift = vec![Vec::with_capacity(n); 3];
    let mut realized_scale = vec![Vec::with_capacity(n); 3];
    let mut realized_shift = vec![Vec::with_capacity(n); 3];
    for _ in 0..n {
        let d = DistortionDraw::sample(&params, &mut rng);
        let b = d.apply(&clean, shape);
        for a in 0..3 {
            scale[a].push(d.log2_scale[a]);
            shift[a].push(d.translation_fraction[a]);
            realized_scale[a].push((b.side(a) as f64 / side as f64).log2());
            let moved = 0.5 * ((b.start[a] + b.stop[a]) - (clean.start[a] + clean.stop[a])) as f64;
            realized_shift[a].push(moved / side as f64);
        }
    }
    let rel = |got: f64, want: f64| (got - want).abs() / want;
    let mut worst: f64 = 0.0;
    for a in 0..3 {
        worst = worst
            .max(rel(std_dev(&scale[a]), params.sigma_log2_scale))
            .max(rel(std_dev(&shift[a]), params.sigma_translation_fraction))
            .max(rel(std_dev(&realized_scale[a]), params.sigma_log2_scale))
            .max(rel(std_dev(&realized_shift[a]), params.sigma_translation_fraction));
    }
    Ok((
        worst <= 0.01,
        format!("10^5 draws per axis, worst relative std error {:.3}%", 100.0 * worst),
    ))
}

// ---------------------------------------------------------------------- knn

struct Candidate {
    row: usize,
    id: String,
    distance: f64,
}

fn oracle_ranking(table: &EmbeddingTable, q: &[f32], exclude: Option<&str>) -> Vec<Candidate> {
    let mut all: Vec<Candidate> = Vec::new();
    for (i, r) in table.rows.iter().enumerate() {
        if exclude == Some(r.image_id.as_str()) {
            continue;
        }
        let v = table.vector(i);
        let mut s = 0.0f64;
        for j in 0..q.len() {
            let d = f64::from(q[j]) - f64::from(v[j]);
            s += d * d;
        }
        all.push(Candidate {
            row: i,
            id: r.tumor_id.clone(),
            distance: s.sqrt(),
        });
    }
    all.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.id.cmp(&b.id)));
    all
}

fn oracle_vote(labeled: &[(usize, f64)]) -> Option<usize> {
    let mut labels: Vec<(usize, usize, f64)> = Vec::new();
    for &(l, d) in labeled {
        match labels.iter_mut().find(|e| e.0 == l) {
            Some(e) => {
                e.1 += 1;
                e.2 += d;
            }
            None => labels.push((l, 1, d)),
        }
    }
    labels.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.total_cmp(&b.2)).then(a.0.cmp(&b.0)));
    labels.first().map(|e| e.0)
}

fn knn_parity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for case in 0..1000 {
        let n = rng.gen_range(1..60);
        let c = rng.gen_range(1..8);
        let n_images = rng.gen_range(1..=n.min(12));
        let mut table = EmbeddingTable::new("oracle".into(), c);
        for i in 0..n {
            let labels: TaskLabels = [(Task::Type, rng.gen_bool(0.8).then(|| rng.gen_range(0..3)))]
                .into_iter()
                .collect();
            let row = TableRow {
                tumor_id: format!("t{:03}", (i * 37) % 101),
                image_id: format!("img{}", rng.gen_range(0..n_images)),
                bbox: BBox::new([0; 3], [1; 3]).unwrap(),
                labels,
                linear_size_mm: rng.gen_range(2.0..30.0),
            };
            // Coarse coordinates make exact distance ties common.
            let v: Vec<f32> = (0..c).map(|_| rng.gen_range(-3..=3) as f32 * 0.5).collect();
            table.push(row, &v).map_err(err)?;
        }
        let index = RetrievalIndex::new(table.clone(), false).map_err(err)?;
        let q: Vec<f32> = (0..c).map(|_| rng.gen_range(-3..=3) as f32 * 0.5).collect();
        let k = rng.gen_range(1..n + 4);
        let excluded = rng.gen_bool(0.5).then(|| format!("img{}", rng.gen_range(0..n_images)));
        let exclude = excluded.as_deref();

        let oracle = oracle_ranking(&table, &q, exclude);
        let fail = |what: &str| Ok((false, format!("case {case}: {what}")));
        match index.query(&q, k, exclude) {
            Ok(r) => {
                if oracle.is_empty() {
                    return fail("answered with no candidates");
                }
                let want: Vec<(&str, f64)> =
                    oracle.iter().take(k).map(|o| (o.id.as_str(), o.distance)).collect();
                let got: Vec<(&str, f64)> =
                    r.neighbors.iter().map(|o| (o.tumor_id.as_str(), o.distance)).collect();
                if got != want || r.truncated != (oracle.len() < k) {
                    return fail("neighbor list differs");
                }
                if r.neighbors.iter().any(|nb| Some(table.rows[nb.row].image_id.as_str()) == exclude) {
                    return fail("excluded image returned");
                }
                let size = oracle.iter().take(k).map(|o| table.rows[o.row].linear_size_mm).sum::<f64>()
                    / want.len() as f64;
                if index.knn_regress(&q, k, exclude).map_err(err)? != size {
                    return fail("regression differs");
                }
            }
            Err(_) if oracle.is_empty() => {}
            Err(e) => return fail(&e.to_string()),
        }
        let labeled: Vec<(usize, f64)> = oracle
            .iter()
            .filter_map(|o| table.rows[o.row].label(Task::Type).map(|l| (l, o.distance)))
            .take(k)
            .collect();
        match (index.knn_classify(&q, k, Task::Type, exclude), oracle_vote(&labeled)) {
            (Ok(a), Some(b)) if a == b => {}
            (Err(_), None) => {}
            _ => return fail("vote differs"),
        }
    }
    Ok((true, "1000 random instances match the full-sort oracle".into()))
}

// ---------------------------------------------------------- end to end runs

struct Workdir {
    path: PathBuf,
    _temp: Option<tempfile::TempDir>,
}

fn workdir() -> Result<Workdir, String> {
    match std::env::var_os("ACCEPTANCE_WORKDIR") {
        Some(p) => {
            let path = PathBuf::from(p);
            std::fs::create_dir_all(&path).map_err(err)?;
            Ok(Workdir { path, _temp: None })
        }
        None => {
            let t = tempfile::tempdir().map_err(err)?;
            Ok(Workdir {
                path: t.path().to_path_buf(),
                _temp: Some(t),
            })
        }
    }
}

fn desk_config(root: &Path) -> ExperimentConfig {
    ExperimentConfig {
        output_root: root.to_path_buf(),
        ..ExperimentConfig::default()
    }
}

fn retrieval_quality(run: &Run) -> Check {
    let (summary, elapsed) = run.as_ref().map_err(Clone::clone)?;
    let dir = &summary.experiment_dir;
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("eval/knn.json")).map_err(err)?)
            .map_err(err)?;
    let rmse = report["size_rmse_mm"].as_f64().ok_or("report lacks size_rmse_mm")?;
    let baseline = report["size_rmse_mean_baseline_mm"]
        .as_f64()
        .ok_or("report lacks the RMSE baseline")?;
    let m = &summary.metrics;
    let type_acc = m["type_acc"];
    let lr_acc = m["left_right_acc"];
    let minutes = elapsed.as_secs_f64() / 60.0;
    let pass = type_acc >= 0.85 && lr_acc >= 0.90 && rmse <= 0.5 * baseline && minutes <= 30.0;
    Ok((
        pass,
        format!(
            "type {type_acc:.3} (>= 0.85), left_right {lr_acc:.3} (>= 0.90), size RMSE {rmse:.2} vs baseline {baseline:.2} (ratio {:.2} <= 0.5), {minutes:.1} min (<= 30)",
            rmse / baseline
        ),
    ))
}

fn distortion_robustness(run: &Run) -> Check {
    let (summary, _) = run.as_ref().map_err(Clone::clone)?;
    let delta = *summary
        .distortion_deltas
        .get("type_acc")
        .ok_or("no type accuracy delta")?;
    let drop = -delta;
    Ok((drop <= 0.20, format!("type accuracy drop {drop:.3} (<= 0.20)")))
}

fn task_ablation(root: &Path) -> Check {
    let cfg = desk_config(root);
    let subsets = vec![
        vec![Task::Segmentation],
        vec![Task::Type],
        Task::ALL.to_vec(),
    ];
    let report = ablation(&cfg, &subsets).map_err(err)?;
    if report.rows.len() != 3 || report.table().lines().count() < 4 {
        return Ok((false, "comparison table incomplete".into()));
    }
    let acc = |i: usize| report.rows[i].metrics.get("type_acc").copied();
    let (Some(seg), Some(ty), Some(all)) = (acc(0), acc(1), acc(2)) else {
        return Ok((false, "type accuracy missing from a row".into()));
    };
    Ok((
        all >= seg,
        format!("type accuracy: segmentation {seg:.3}, type {ty:.3}, all tasks {all:.3} (all >= segmentation)"),
    ))
}

fn schwannoma_clusters(run: &Run) -> Check {
    let (summary, _) = run.as_ref().map_err(Clone::clone)?;
    let dir = &summary.experiment_dir;
    let rows = read_scatter_csv(&dir.join("viz/tsne.csv")).map_err(err)?;

    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for r in &rows {
        lo = [lo[0].min(r.x), lo[1].min(r.y)];
        hi = [hi[0].max(r.x), hi[1].max(r.y)];
    }
    let cut = 0.1 * ((hi[0] - lo[0]).powi(2) + (hi[1] - lo[1]).powi(2)).sqrt();
    let pts: Vec<[f64; 2]> = rows
        .iter()
        .filter(|r| r.tumor_type == "schwannoma")
        .map(|r| [r.x, r.y])
        .collect();
    let mut parent: Vec<usize> = (0..pts.len()).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            let d = ((pts[i][0] - pts[j][0]).powi(2) + (pts[i][1] - pts[j][1]).powi(2)).sqrt();
            if d <= cut {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a] = b;
            }
        }
    }
    let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
    for i in 0..pts.len() {
        *sizes.entry(find(&mut parent, i)).or_default() += 1;
    }
    let clusters = sizes.values().filter(|&&s| s >= 2).count();

    let train = EmbeddingTable::read(&dir.join("tables/train.tbl")).map_err(err)?;
    let test = EmbeddingTable::read(&dir.join("tables/test.tbl")).map_err(err)?;
    let mut all = train.clone();
    for (i, row) in test.rows.iter().enumerate() {
        all.push(row.clone(), test.vector(i)).map_err(err)?;
    }
    let config: ExperimentConfig =
        serde_json::from_str(&std::fs::read_to_string(dir.join("config.json")).map_err(err)?)
            .map_err(err)?;
    let again = project_table(&all, &config.viz.projection).map_err(err)?;
    let deterministic = again.len() == rows.len()
        && again
            .iter()
            .zip(&rows)
            .all(|(c, r)| c[0] == r.x && c[1] == r.y);
    let mut size_list: Vec<usize> = sizes.values().copied().collect();
    size_list.sort_unstable_by(|a, b| b.cmp(a));
    Ok((
        clusters >= 2 && deterministic,
        format!(
            "{} schwannomas, {clusters} clusters of >= 2 at cut {cut:.2} (sizes {size_list:?}), rerun identical: {deterministic}",
            pts.len()
        ),
    ))
}

fn http_get(addr: std::net::SocketAddr, path: &str) -> Result<(u16, String), String> {
    let mut s = TcpStream::connect(addr).map_err(err)?;
    s.set_read_timeout(Some(Duration::from_secs(10))).map_err(err)?;
    write!(s, "GET {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n").map_err(err)?;
    let mut raw = Vec::new();
    s.read_to_end(&mut raw).map_err(err)?;
    let text = String::from_utf8(raw).map_err(err)?;
    let status = text
        .split_whitespace()
        .nth(1)
        .and_then(|c| c.parse().ok())
        .ok_or("malformed status line")?;
    let (head, body) = text.split_once("\r\n\r\n").ok_or("no header terminator")?;
    let body = if head.to_ascii_lowercase().contains("transfer-encoding: chunked") {
        dechunk(body)?
    } else {
        body.to_string()
    };
    Ok((status, body))
}

fn dechunk(mut body: &str) -> Result<String, String> {
    let mut out = String::new();
    loop {
        let (size, rest) = body.split_once("\r\n").ok_or("bad chunk")?;
        let n = usize::from_str_radix(size.trim(), 16).map_err(err)?;
        if n == 0 {
            return Ok(out);
        }
        out.push_str(rest.get(..n).ok_or("short chunk")?);
        body = rest.get(n + 2..).ok_or("short chunk")?;
    }
}

fn serving_parity(run: &Run) -> Check {
    let (summary, _) = run.as_ref().map_err(Clone::clone)?;
    let table = EmbeddingTable::read(&summary.experiment_dir.join("tables/test.tbl")).map_err(err)?;
    let index = RetrievalIndex::new(table.clone(), false).map_err(err)?;
    let server = serve(index.clone(), "127.0.0.1:0").map_err(err)?;
    let addr = server.addr();

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut ids: Vec<&str> = table.rows.iter().map(|r| r.tumor_id.as_str()).collect();
    ids.shuffle(&mut rng);
    let mut checked = BTreeSet::new();
    for (n, id) in ids.iter().cycle().take(50).enumerate() {
        let k = 1 + n % 7;
        let (status, body) = http_get(addr, &format!("/neighbors?tumor_id={id}&k={k}"))?;
        // Expected answer built from the offline index, keys in canonical order.
        let row = table.position(id).ok_or("id vanished")?;
        let offline = index
            .query(table.vector(row), k, Some(&table.rows[row].image_id))
            .map_err(err)?;
        let expected = NeighborsResponse {
            query: id.to_string(),
            k,
            truncated: offline.truncated,
            neighbors: offline
                .neighbors
                .iter()
                .map(|nb| {
                    let r = &table.rows[nb.row];
                    ServedNeighbor {
                        tumor_id: nb.tumor_id.clone(),
                        image_id: r.image_id.clone(),
                        distance: nb.distance,
                        labels: r.labels.clone(),
                        linear_size_mm: r.linear_size_mm,
                    }
                })
                .collect(),
        };
        let expected = serde_json::to_value(&expected).map_err(err)?.to_string();
        if status != 200 || body != expected {
            return Ok((false, format!("`{id}` at k={k} differs from the offline answer")));
        }
        checked.insert(*id);
    }
    let (unknown, _) = http_get(addr, "/neighbors?tumor_id=no_such_tumor&k=3")?;
    let (missing, _) = http_get(addr, "/neighbors?k=3")?;
    let (bad_k, _) = http_get(addr, &format!("/neighbors?tumor_id={}&k=0", ids[0]))?;
    server.shutdown();
    let pass = unknown == 404 && missing == 400 && bad_k == 400;
    Ok((
        pass,
        format!(
            "50 queries ({} distinct ids) match offline; unknown id {unknown}, missing id {missing}, k=0 {bad_k}",
            checked.len()
        ),
    ))
}

type Run = Result<(PipelineSummary, Duration), String>;

/// Criteria named in `ACCEPTANCE_ONLY` (comma-separated numbers), or all.
fn selected() -> Option<BTreeSet<usize>> {
    let spec = std::env::var("ACCEPTANCE_ONLY").ok()?;
    Some(spec.split(',').filter_map(|s| s.trim().parse().ok()).collect())
}

fn main() {
    let only = selected();
    let wd = workdir();
    let root = wd.as_ref().map(|w| w.path.join("desk"));
    let desk = std::cell::OnceCell::<Run>::new();
    let run = || {
        desk.get_or_init(|| {
            let root = root.as_ref().map_err(|e| e.to_string())?;
            let started = Instant::now();
            run_pipeline(&desk_config(root))
                .map(|s| (s, started.elapsed()))
                .map_err(err)
        })
    };

    let checks: Vec<(&str, Box<dyn Fn() -> Check + '_>)> = vec![
        ("gradient check", Box::new(gradient_check)),
        ("roipool oracle", Box::new(roipool_oracle)),
        ("omitted labels equal zero weight", Box::new(omission_equivalence)),
        ("step schedule", Box::new(schedule)),
        ("distortion sampler", Box::new(distortion_sampler)),
        ("knn parity", Box::new(knn_parity)),
        ("desk retrieval quality", Box::new(|| retrieval_quality(run()))),
        ("distortion robustness", Box::new(|| distortion_robustness(run()))),
        ("task ablation", Box::new(|| {
            run().as_ref().map_err(Clone::clone)?;
            task_ablation(root.as_ref().map_err(|e| e.to_string())?)
        })),
        ("schwannoma clusters", Box::new(|| schwannoma_clusters(run()))),
        ("serving parity", Box::new(|| serving_parity(run()))),
    ];

    let (mut passed, mut failed) = (0, 0);
    for (i, (name, check)) in checks.iter().enumerate() {
        let label = format!("{} {name}", i + 1);
        if only.as_ref().is_some_and(|o| !o.contains(&(i + 1))) {
            println!("SKIP  {label}");
            continue;
        }
        let r = check();
        report(&label, &r);
        if matches!(r, Ok((true, _))) {
            passed += 1;
        } else {
            failed += 1;
        }
    }
    println!("acceptance: {passed} passed, {failed} failed");
    if failed > 0 {
        std::process::exit(1);
    }
}

fn report(name: &str, r: &Check) {
    match r {
        Ok((true, d)) => println!("PASS  {name}: {d}"),
        Ok((false, d)) => println!("FAIL  {name}: {d}"),
        Err(e) => println!("FAIL  {name}: error: {e}"),
    }
}
