"""Operational surface: one subcommand per pipeline stage.

    patchgraph phantom            write a synthetic dataset + labels CSV
    patchgraph build-graphs       register subjects and build patch graphs
    patchgraph pretrain           run contrastive pretraining
    patchgraph probe              linear probes on frozen subject features
    patchgraph explain            per-region activation heatmap for a subject
    patchgraph export-embeddings  subject features as CSV + 2D scatter

Every artifact directory gets a provenance.json with the stage config hash;
commands verify upstream hashes before consuming. Exit codes: 0 success,
1 usage/config error, 2 partial failure, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .atlas_graph import (
    GraphBuildConfig,
    RegistrationConfig,
    build_atlas_grid,
    build_patch_graph,
    load_patch_graph,
    save_patch_graph,
)
from .augment import AugmentConfig
from .config import ConfigError, STAGE_KEYS, load_config, stage_hash
from .contrastive import ContrastiveConfig
from .encoders import EncoderConfig
from .evaluation import (
    fit_full_probe,
    kfold_split,
    linear_probe_classification,
    linear_probe_regression,
)
from .explain import export_embeddings, pca_2d, region_activations, render_heatmap
from .trainer import (
    Checkpoint,
    PretrainConfig,
    TrainConfig,
    extract_features_batch,
    extract_node_features,
    pretrain,
)
from .volume_io import (
    PhantomSpec,
    SubjectRecord,
    generate_phantom,
    load_labels,
    load_volume,
    save_volume,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_PARTIAL = 2
EXIT_RUNTIME = 3


class PartialFailure(RuntimeError):
    pass


# ---------------------------------------------------------------- provenance


def _write_provenance(out_dir: Path, stage: str, cfg: dict, parent_hash=None) -> None:
    prov = {
        "stage": stage,
        "hash": stage_hash(cfg, stage),
        "parent_hash": parent_hash,
        "config": {k: cfg[k] for k in STAGE_KEYS[stage]},
    }
    with open(out_dir / "provenance.json", "w", encoding="utf-8") as f:
        json.dump(prov, f, indent=2, sort_keys=True)


def _read_provenance(path: Path):
    prov_path = Path(path) / "provenance.json"
    if not prov_path.exists():
        return None
    with open(prov_path, encoding="utf-8") as f:
        return json.load(f)


def _verify_upstream(path: Path, stage: str, cfg: dict) -> str | None:
    """Check an input directory was produced by `stage` under this config."""
    prov = _read_provenance(path)
    if prov is None:
        print(f"note: {path} has no provenance.json; skipping upstream hash check", file=sys.stderr)
        return None
    if prov.get("stage") != stage:
        raise ConfigError(f"{path}: expected a {stage!r} artifact, found {prov.get('stage')!r}")
    expected = stage_hash(cfg, stage)
    if prov.get("hash") != expected:
        raise ConfigError(
            f"{path}: config hash mismatch (artifacts built with {prov.get('hash')}, "
            f"current config expects {expected}); regenerate or fix the config"
        )
    return expected


def _subject_id_from_path(path: Path) -> str:
    name = path.name
    for suffix in (".nii.gz", ".nii"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return path.stem


# ------------------------------------------------------------------- phantom


def _phantom_spec(cfg: dict, seed: int, n_affected: int) -> PhantomSpec:
    p = cfg["phantom"]
    return PhantomSpec(
        shape=tuple(p["shape"]),
        n_regions_affected=n_affected,
        lesion_intensity_delta=p["lesion_intensity_delta"],
        severity_rule=p["severity_rule"],
        seed=seed,
        lattice_shape=tuple(p["lattice_shape"]),
        lattice_margin_frac=p["lattice_margin_frac"],
        lesion_radius=p["lesion_radius"],
        warp_max_disp=p["warp_max_disp"],
        rot_max_deg=p["rot_max_deg"],
        scale_range=tuple(p["scale_range"]),
        shift_max=p["shift_max"],
        gain_jitter=p["gain_jitter"],
        offset_jitter=p["offset_jitter"],
        noise_sigma=p["noise_sigma"],
        texture_amp=p["texture_amp"],
        template_seed=p["template_seed"],
    )


def _atlas_spec(cfg: dict) -> PhantomSpec:
    """The clean canonical template: no lesions, no warp, no nuisance."""
    spec = _phantom_spec(cfg, seed=0, n_affected=0)
    spec.warp_max_disp = 0.0
    spec.rot_max_deg = 0.0
    spec.scale_range = (1.0, 1.0)
    spec.shift_max = 0.0
    spec.gain_jitter = 0.0
    spec.offset_jitter = 0.0
    spec.noise_sigma = 0.0
    return spec


def cmd_phantom(cfg: dict, out_dir: Path, force: bool = False) -> int:
    count = int(cfg["phantom"]["count"])
    if count < 1:
        raise ConfigError(f"phantom.count must be >= 1, got {count}")
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise ConfigError(f"{out_dir} exists and is not empty (use --force to overwrite)")
    (out_dir / "subjects").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(exist_ok=True)

    rng = np.random.default_rng(cfg["seed"])
    n_diseased = round(count * cfg["phantom"]["diseased_fraction"])
    diseased = rng.permutation(count) < n_diseased
    choices = list(cfg["phantom"]["affected_cells_choices"])
    lesion_counts = [int(rng.choice(choices)) if d else 0 for d in diseased]

    atlas = generate_phantom(_atlas_spec(cfg))
    save_volume(atlas.volume, out_dir / "atlas.nii.gz")
    save_volume(atlas.mask, out_dir / "atlas_mask.nii.gz")

    label_rows = []
    for i in range(count):
        seed = int(cfg["seed"]) * 1_000_000 + i
        record = generate_phantom(_phantom_spec(cfg, seed=seed, n_affected=lesion_counts[i]))
        save_volume(record.volume, out_dir / "subjects" / f"{record.subject_id}.nii.gz")
        save_volume(record.mask, out_dir / "masks" / f"{record.subject_id}.nii.gz")
        label_rows.append({"subject_id": record.subject_id, **record.labels})

    columns = ["subject_id"] + [k for k in label_rows[0] if k != "subject_id"]
    with open(out_dir / "labels.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=columns)
        writer.writeheader()
        writer.writerows(label_rows)

    _write_provenance(out_dir, "phantom", cfg)
    print(f"wrote {count} subjects to {out_dir}")
    return EXIT_OK


# -------------------------------------------------------------- build-graphs


def _graph_build_config(cfg: dict) -> GraphBuildConfig:
    r = cfg["registration"]
    return GraphBuildConfig(
        registration=RegistrationConfig(
            kind=r["kind"],
            pyramid=tuple(r["pyramid"]),
            iters=tuple(r["iters"]),
            lr=r["lr"],
            lambda_reg=r["lambda_reg"],
            disp_control_pts=r["disp_control_pts"],
            disp_iters=r["disp_iters"],
            disp_lr=r["disp_lr"],
            lambda_smooth=r["lambda_smooth"],
        ),
        threshold_mm=cfg["graph"]["threshold_mm"],
        normalize=cfg["io"]["normalize"],
        adjacency_space=cfg["graph"]["adjacency_space"],
    )


def _build_one_graph(subject_path, atlas, grid, build_cfg, out_dir, graphs_hash):
    subject_id = _subject_id_from_path(subject_path)
    record = SubjectRecord(subject_id=subject_id, volume=load_volume(subject_path))
    graph = build_patch_graph(record, atlas, grid, build_cfg)
    save_patch_graph(graph, Path(out_dir) / f"{subject_id}.npz", {"config_hash": graphs_hash})
    return subject_id


def cmd_build_graphs(cfg: dict, dataset_dir: Path, out_dir: Path, force=False, jobs=1) -> int:
    dataset_dir = Path(dataset_dir)
    out_dir = Path(out_dir)
    _verify_upstream(dataset_dir, "phantom", cfg)
    subject_paths = sorted((dataset_dir / "subjects").glob("*.nii*"))
    if not subject_paths:
        raise ConfigError(f"no subject volumes under {dataset_dir / 'subjects'}")

    graphs_hash = stage_hash(cfg, "graphs")
    prov = _read_provenance(out_dir)
    if prov is not None and prov.get("hash") == graphs_hash and not force:
        existing = {p.stem for p in out_dir.glob("*.npz")}
        wanted = {_subject_id_from_path(p) for p in subject_paths}
        if wanted <= existing:
            print(f"{out_dir} is up to date (config hash {graphs_hash}); skipping")
            return EXIT_OK

    out_dir.mkdir(parents=True, exist_ok=True)
    atlas_path = dataset_dir / "atlas.nii.gz"
    atlas = load_volume(atlas_path) if atlas_path.exists() else load_volume(subject_paths[0])
    mask_path = dataset_dir / "atlas_mask.nii.gz"
    atlas_mask = load_volume(mask_path) if mask_path.exists() else atlas
    grid = build_atlas_grid(
        atlas_mask,
        patch_size=tuple(cfg["grid"]["patch_size"]),
        stride=tuple(cfg["grid"]["stride"]),
        min_mask_overlap=cfg["grid"]["min_mask_overlap"],
    )
    build_cfg = _graph_build_config(cfg)

    failures = {}
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {
                pool.submit(
                    _build_one_graph, path, atlas, grid, build_cfg, out_dir, graphs_hash
                ): path
                for path in subject_paths
            }
            for future, path in futures.items():
                try:
                    future.result()
                except Exception as e:  # registration failures are per-subject
                    failures[_subject_id_from_path(path)] = str(e)
    else:
        for path in subject_paths:
            try:
                _build_one_graph(path, atlas, grid, build_cfg, out_dir, graphs_hash)
            except Exception as e:
                failures[_subject_id_from_path(path)] = str(e)

    _write_provenance(out_dir, "graphs", cfg, parent_hash=stage_hash(cfg, "phantom"))
    n_ok = len(subject_paths) - len(failures)
    print(f"built {n_ok}/{len(subject_paths)} graphs in {out_dir} (N={grid.n_patches})")
    if failures:
        with open(out_dir / "failures.json", "w", encoding="utf-8") as f:
            json.dump(failures, f, indent=2, sort_keys=True)
        raise PartialFailure(f"{len(failures)} subject(s) failed; see {out_dir / 'failures.json'}")
    return EXIT_OK


# ------------------------------------------------------------------ pretrain


def _pretrain_config(cfg: dict) -> PretrainConfig:
    t = cfg["trainer"]
    c = cfg["contrastive"]
    return PretrainConfig(
        encoder=EncoderConfig(
            patch_size=tuple(cfg["encoder"]["patch_size"]),
            block_channels=tuple(cfg["encoder"]["block_channels"]),
            convs_per_block=tuple(cfg["encoder"]["convs_per_block"]),
        ),
        contrastive=ContrastiveConfig(
            temperature=c["temperature"],
            queue_capacity=c["queue_capacity"],
            graph_queue_capacity=c["graph_queue_capacity"],
            use_graph_queue=c["use_graph_queue"],
            momentum=c["momentum"],
            patch_batch=t["patch_batch"],
            graph_batch=t["graph_batch"],
            patch_loss_weight=c["patch_loss_weight"],
            graph_loss_weight=c["graph_loss_weight"],
        ),
        augment=AugmentConfig(
            elastic_grid_spacing=cfg["augment"]["elastic_grid_spacing"],
            elastic_max_disp=cfg["augment"]["elastic_max_disp"],
            noise_sigma=cfg["augment"]["noise_sigma"],
            gamma_range=tuple(cfg["augment"]["gamma_range"]),
        ),
        train=TrainConfig(
            epochs=t["epochs"],
            lr=t["lr"],
            beta1=t["beta1"],
            beta2=t["beta2"],
            weight_decay=t["weight_decay"],
            schedule=t["schedule"],
            patch_batch=t["patch_batch"],
            graph_batch=t["graph_batch"],
            seed=cfg["seed"],
        ),
    )


def _load_graphs(graphs_dir: Path):
    paths = sorted(Path(graphs_dir).glob("*.npz"))
    if not paths:
        raise ConfigError(f"no graph archives under {graphs_dir}")
    return [load_patch_graph(p) for p in paths]


def cmd_pretrain(cfg: dict, graphs_dir: Path, out_dir: Path, resume=False) -> int:
    graphs_dir = Path(graphs_dir)
    out_dir = Path(out_dir)
    _verify_upstream(graphs_dir, "graphs", cfg)
    graphs = _load_graphs(graphs_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    resume_from = out_dir / "checkpoint.pt" if resume and (out_dir / "checkpoint.pt").exists() else None

    checkpoint = pretrain(
        graphs,
        _pretrain_config(cfg),
        out_dir=out_dir,
        resume_from=resume_from,
        config_hash=stage_hash(cfg, "pretrain"),
    )
    from .plots import plot_loss_curves

    plot_loss_curves(checkpoint.state["loss_rows"], out_dir / "loss_curves.png")
    _write_provenance(out_dir, "pretrain", cfg, parent_hash=stage_hash(cfg, "graphs"))
    final = checkpoint.state["loss_rows"][-1]
    print(f"pretrained {checkpoint.state['step']} steps; final combined loss {final[4]:.4f}")
    return EXIT_OK


# --------------------------------------------------------------------- probe


def _find_checkpoint(path: Path) -> Path:
    path = Path(path)
    if path.is_dir():
        path = path / "checkpoint.pt"
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    return path


def _verify_checkpoint(checkpoint: Checkpoint, cfg: dict) -> None:
    stored = checkpoint.state.get("config_hash")
    expected = stage_hash(cfg, "pretrain")
    if stored is not None and stored != expected:
        raise ConfigError(
            f"checkpoint config hash {stored} != current config {expected}; "
            "probe/explain must run under the pretraining config"
        )


def _task_kind(values):
    present = [v for v in values if v is not None]
    if all(isinstance(v, (int, str)) for v in present):
        return "classification"
    return "regression"


def cmd_probe(cfg: dict, checkpoint_path, graphs_dir, labels_path, out_dir: Path) -> int:
    out_dir = Path(out_dir)
    _verify_upstream(Path(graphs_dir), "graphs", cfg)
    checkpoint = Checkpoint.load(_find_checkpoint(checkpoint_path))
    _verify_checkpoint(checkpoint, cfg)
    graphs = _load_graphs(graphs_dir)
    labels = load_labels(labels_path)

    ids, pooled, _nodes = extract_features_batch(checkpoint, graphs)
    features = {sid: pooled[i] for i, sid in enumerate(ids)}
    folds = kfold_split(sorted(ids), k=cfg["probe"]["folds"], seed=cfg["probe"]["seed"])

    task_names = cfg["probe"]["tasks"]
    if task_names == "auto":
        task_names = sorted({name for lab in labels.values() for name in lab})
    results = []
    probe_weights = {}
    for task in task_names:
        targets = {sid: labels.get(sid, {}).get(task) for sid in ids}
        if all(v is None for v in targets.values()):
            raise ConfigError(f"task {task!r} has no labels in {labels_path}")
        if _task_kind(targets.values()) == "classification":
            results.append(
                linear_probe_classification(
                    features, targets, folds, l2_strength=cfg["probe"]["l2_strength"], task=task
                )
            )
            weights, biases, classes = fit_full_probe(
                features, targets, l2_strength=cfg["probe"]["l2_strength"]
            )
            probe_weights[task] = (weights, biases, classes)
        else:
            results.append(
                linear_probe_regression(
                    features, targets, folds, ridge_lambda=cfg["probe"]["ridge_lambda"], task=task
                )
            )

    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "results.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["task", "metric", "fold", "value"])
        for r in results:
            for i, v in enumerate(r.fold_values):
                writer.writerow([r.task, r.metric, i, "" if v is None else repr(v)])
            writer.writerow([r.task, r.metric, "mean", repr(r.mean)])
            writer.writerow([r.task, r.metric, "std", repr(r.std)])
    with open(out_dir / "results.json", "w", encoding="utf-8") as f:
        json.dump([r.to_dict() for r in results], f, indent=2)

    arrays = {}
    for task, (weights, biases, classes) in probe_weights.items():
        arrays[f"{task}__weights"] = weights
        arrays[f"{task}__biases"] = biases
        arrays[f"{task}__classes"] = np.asarray([str(c) for c in classes])
    if arrays:
        np.savez(out_dir / "probe_weights.npz", **arrays)

    from .plots import plot_probe_results

    plot_probe_results(results, out_dir / "probe_results.png")
    _write_provenance(out_dir, "probe", cfg, parent_hash=stage_hash(cfg, "pretrain"))
    for r in results:
        print(f"{r.task}: mean {r.metric} {r.mean:.4f} (std {r.std:.4f})")
    return EXIT_OK


# ------------------------------------------------------------------- explain


def cmd_explain(cfg, checkpoint_path, probe_dir, graphs_dir, dataset_dir, subject_id, out_dir) -> int:
    out_dir = Path(out_dir)
    checkpoint = Checkpoint.load(_find_checkpoint(checkpoint_path))
    _verify_checkpoint(checkpoint, cfg)
    graph_path = Path(graphs_dir) / f"{subject_id}.npz"
    if not graph_path.exists():
        raise ConfigError(f"no graph archive for subject {subject_id!r} in {graphs_dir}")
    graph = load_patch_graph(graph_path)

    task = cfg["explain"]["task"]
    weights_path = Path(probe_dir) / "probe_weights.npz"
    if not weights_path.exists():
        raise ConfigError(f"{weights_path} not found (run the probe command first)")
    with np.load(weights_path, allow_pickle=False) as z:
        key = f"{task}__weights"
        if key not in z:
            raise ConfigError(f"probe weights for task {task!r} not in {weights_path}")
        weights = z[key]
        biases = z[f"{task}__biases"]
        classes = list(z[f"{task}__classes"])

    nodes = extract_node_features(checkpoint, graph)
    if weights.shape[0] == 1:  # binary probe: logit of the positive class
        class_index, target = 0, classes[-1]
    else:
        logits = biases + weights @ nodes.mean(axis=0)
        class_index = int(np.argmax(logits))
        target = classes[class_index]
    amap = region_activations(
        weights,
        biases,
        nodes,
        target_class=target,
        class_index=class_index,
        subject_id=subject_id,
        prenormalize=cfg["explain"]["prenormalize"],
    )

    volume = load_volume(Path(dataset_dir) / "subjects" / f"{subject_id}.nii.gz")
    heatmap = render_heatmap(amap, graph, volume)

    out_dir.mkdir(parents=True, exist_ok=True)
    save_volume(heatmap, out_dir / f"heatmap_{subject_id}.nii.gz")
    with open(out_dir / f"region_scores_{subject_id}.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["region_id", "raw_score", "normalized_score"])
        for j in range(graph.n_patches):
            writer.writerow([j, repr(float(amap.raw[j])), repr(float(amap.normalized[j]))])

    from .plots import plot_heatmap_slices

    plot_heatmap_slices(
        volume, heatmap, out_dir / f"heatmap_{subject_id}.png", cfg["explain"]["axial_index"]
    )
    print(
        f"explained {subject_id} for task {task!r} (target class {target}); "
        f"top region {int(np.argmax(amap.raw))}"
    )
    return EXIT_OK


# ------------------------------------------------------------------- export


def cmd_export_embeddings(cfg, checkpoint_path, graphs_dir, labels_path, out_dir) -> int:
    out_dir = Path(out_dir)
    checkpoint = Checkpoint.load(_find_checkpoint(checkpoint_path))
    _verify_checkpoint(checkpoint, cfg)
    graphs = _load_graphs(graphs_dir)
    labels = load_labels(labels_path) if labels_path else {}

    ids, pooled, _ = extract_features_batch(checkpoint, graphs)
    out_dir.mkdir(parents=True, exist_ok=True)
    export_embeddings(out_dir / "embeddings.csv", ids, pooled, labels)

    coords = pca_2d(pooled)
    np.savetxt(
        out_dir / "embeddings_2d.csv",
        np.column_stack([coords]),
        delimiter=",",
        header="component_1,component_2",
        comments="",
    )
    task = cfg["explain"]["task"]
    color_labels = [labels.get(sid, {}).get(task, "?") for sid in ids]
    from .plots import plot_embedding_scatter

    plot_embedding_scatter(coords, color_labels, out_dir / "embeddings_2d.png", label_name=task)
    print(f"exported {len(ids)} subject embeddings to {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------- main


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patchgraph",
        description="Anatomy-aware patch-graph contrastive pretraining pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--preset", default="desk", choices=["desk", "paper"])
        p.add_argument(
            "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
            help="override a config value (dotted key)",
        )

    p = sub.add_parser("phantom", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("build-graphs", help="build per-subject patch graphs")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("pretrain", help="contrastive pretraining")
    common(p)
    p.add_argument("--graphs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true")

    p = sub.add_parser("probe", help="linear probes on frozen features")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--graphs", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("explain", help="per-region activation heatmap")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--probe", required=True, help="probe output directory")
    p.add_argument("--graphs", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--subject", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("export-embeddings", help="subject features CSV + 2D scatter")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--graphs", required=True)
    p.add_argument("--labels", default=None)
    p.add_argument("--out", required=True)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE

    try:
        cfg = load_config(args.config, args.preset, args.overrides)
        if args.command == "phantom":
            return cmd_phantom(cfg, args.out, force=args.force)
        if args.command == "build-graphs":
            return cmd_build_graphs(cfg, args.dataset, args.out, force=args.force, jobs=args.jobs)
        if args.command == "pretrain":
            return cmd_pretrain(cfg, args.graphs, args.out, resume=args.resume)
        if args.command == "probe":
            return cmd_probe(cfg, args.checkpoint, args.graphs, args.labels, args.out)
        if args.command == "explain":
            return cmd_explain(
                cfg, args.checkpoint, args.probe, args.graphs, args.dataset, args.subject, args.out
            )
        if args.command == "export-embeddings":
            return cmd_export_embeddings(cfg, args.checkpoint, args.graphs, args.labels, args.out)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except PartialFailure as e:
        print(f"partial failure: {e}", file=sys.stderr)
        return EXIT_PARTIAL
    except Exception as e:  # noqa: BLE001 - runtime failures map to exit 3
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
