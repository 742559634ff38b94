"""Command line entry points.

Verbs: ingest, train, eval, cluster, posttrain, experiment, serve,
label.  Exit codes: 0 success, 1 configuration error, 2 data error,
3 training failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import urllib.error
import urllib.request
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .clustering import choose_k, posttrain, silhouette_score
from .config import default_config, load_config
from .errors import ConfigError, DataError, TrainingError
from .experiment import run_experiment_grid, write_report
from .flows import (LabeledFlow, MaskPolicy, ReassemblyStats, batch_matrix,
                    load_manifest, pcap_to_flows, write_manifest)
from .heads import (KIND_DOCPP, KIND_OPENMAX, RESERVED_TRAIN_LABEL,
                    evaluate_open_set)
from .lifecycle import Deployment, LifecycleConfig, LifecycleManager, \
    train_full_model
from .service import IdsService
from .synthetic import default_profile_pool, generate_synthetic, load_profiles

log = logging.getLogger(__name__)


def _config_from_args(args):
    if getattr(args, "config", None):
        return load_config(args.config)
    return default_config()


def _openmax_from(cfg):
    from .heads import OpenMaxConfig
    return OpenMaxConfig(tail_size=cfg.heads.openmax_tail_size,
                         alpha=cfg.heads.openmax_alpha,
                         distance=cfg.heads.openmax_distance,
                         threshold=cfg.heads.openmax_threshold)


def _arch_from(cfg, n_classes: int):
    from .model import Architecture
    a = cfg.arch
    return Architecture(input_dim=a.input_dim, conv_width=a.conv_width,
                        conv_channels=a.conv_channels,
                        conv_stride=a.conv_stride, fc1_units=a.fc1_units,
                        n_classes=n_classes)


# ---------------------------------------------------------------------------
# verbs

def cmd_ingest(args) -> int:
    mask = MaskPolicy(mode="none" if args.no_mask else "headers")
    stats = ReassemblyStats()
    flows = pcap_to_flows(args.pcap, label=args.label, mask=mask,
                          idle_timeout=args.idle_timeout, stats=stats)
    write_manifest(flows, args.out)
    print(f"wrote {len(flows)} flows to {args.out} "
          f"({stats.packets} packets, {stats.malformed} malformed skipped, "
          f"{stats.capped} flows cut at the packet cap)")
    return 0


def _training_flows(args, cfg):
    """Flows plus class list for the train verb."""
    flows: list[LabeledFlow] = []
    if args.manifest:
        for path in args.manifest:
            flows.extend(load_manifest(path))
    else:
        profiles = (load_profiles(cfg.data.profiles_path)
                    if cfg.data.profiles_path
                    else default_profile_pool(cfg.data.pool_size))
        wanted = list(cfg.run.known_labels)
        if not wanted:
            raise ConfigError(
                "train needs --manifest files or run.known_labels in the "
                "config")
        by_name = {p.class_name: p for p in profiles}
        missing = [l for l in wanted if l not in by_name]
        if missing:
            raise ConfigError(f"labels not in the profile pool: {missing}")
        chosen = [by_name[l] for l in wanted]
        extra = None
        if cfg.run.unknown_train_label:
            if cfg.run.unknown_train_label not in by_name:
                raise ConfigError(
                    f"unknown-train label {cfg.run.unknown_train_label!r} "
                    f"not in the profile pool")
            extra = by_name[cfg.run.unknown_train_label]
        flows = generate_synthetic(chosen + ([extra] if extra else []),
                                   cfg.data.flows_per_class, cfg.data.seed)
        if extra:
            flows = [LabeledFlow(tensor=f.tensor,
                                 label=(RESERVED_TRAIN_LABEL
                                        if f.label == extra.class_name
                                        else f.label),
                                 source=f.source, key=f.key)
                     for f in flows]
    labels = sorted({f.label for f in flows} - {RESERVED_TRAIN_LABEL})
    class_list = list(cfg.run.known_labels) or labels
    return flows, class_list


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    head = args.head or cfg.heads.kinds[0]
    flows, class_list = _training_flows(args, cfg)
    has_reserved = any(f.label == RESERVED_TRAIN_LABEL for f in flows)
    if head == KIND_DOCPP and not has_reserved:
        raise ConfigError(
            "rejection training needs samples labeled "
            f"{RESERVED_TRAIN_LABEL!r} (set run.unknown_train_label or "
            "include them in a manifest)")
    result = train_full_model(
        flows, class_list, head, cfg.train.to_train_config(),
        arch=_arch_from(cfg, len(class_list)),
        threshold=cfg.heads.threshold,
        openmax_cfg=_openmax_from(cfg) if head == KIND_OPENMAX else None,
        seed=cfg.train.seed,
        posttrain_epochs=args.posttrain_epochs,
        pull_weight=cfg.grid.pull_weight,
        val_fraction=args.val_fraction)
    model, val_acc = result["model"], result["val_accuracy"]
    if args.val_fraction > 0:
        print(f"validation accuracy {val_acc:.4f}")
    if args.out:
        digest = save_checkpoint(model, args.out)
        print(f"checkpoint {args.out} sha256 {digest}")
    if args.state_dir:
        dep = Deployment(args.state_dir, retention=cfg.lifecycle.retention)
        pointer = dep.publish(model)
        print(f"published generation {pointer['generation']} "
              f"hash {pointer['hash']}")
    if not args.out and not args.state_dir:
        raise ConfigError("give --out and/or --state-dir to keep the model")
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    known = load_manifest(args.manifest) if args.manifest else []
    novel = (load_manifest(args.novelty_manifest)
             if args.novelty_manifest else [])
    if not known and not novel:
        raise DataError("nothing to evaluate; give --manifest and/or "
                        "--novelty-manifest")
    rec = evaluate_open_set(model, known, novel)
    print(json.dumps({
        "closed_accuracy": rec.closed_accuracy,
        "rejection_accuracy": rec.rejection_accuracy,
        "verdict_counts": rec.verdict_counts,
        "n_known": rec.n_known, "n_novel": rec.n_novel,
    }, indent=2, sort_keys=True))
    return 0


def cmd_cluster(args) -> int:
    model = load_checkpoint(args.checkpoint)
    flows = load_manifest(args.manifest)
    sig = model.particularized(batch_matrix(flows))
    cm = choose_k(sig, k_max=args.k_max, seed=args.seed)
    quality = None
    if cm.k >= 2:
        quality = silhouette_score(sig, cm.assignment, seed=args.seed)
    out = sys.stdout if args.out in (None, "-") else open(args.out, "w")
    try:
        for c in range(cm.k):
            members = np.nonzero(cm.assignment == c)[0]
            rec = {"cluster_id": c, "size": int(members.size),
                   "centroid": [round(float(v), 6) for v in cm.centroids[c]],
                   "member_flow_ids": members.tolist(),
                   "provisional_quality": (round(quality, 6)
                                           if quality is not None else None)}
            out.write(json.dumps(rec, sort_keys=True) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
            print(f"wrote {cm.k} cluster records to {args.out}")
    return 0


def cmd_posttrain(args) -> int:
    cfg = _config_from_args(args)
    model = load_checkpoint(args.checkpoint)
    flows = load_manifest(args.manifest)
    refined = posttrain(model, flows, cfg=cfg.train.to_train_config(),
                        pull_weight=args.pull_weight, epochs=args.epochs,
                        cluster_seed=cfg.grid.cluster_seed)
    digest = save_checkpoint(refined, args.out)
    print(f"refined checkpoint {args.out} sha256 {digest}")
    return 0


def cmd_experiment(args) -> int:
    cfg = _config_from_args(args)
    outdir = Path(args.outdir or cfg.outdir)
    report = run_experiment_grid(cfg)
    written = write_report(report, outdir)
    for head in report.heads:
        auc = report.auc.get(head, {}).get("overall")
        print(f"{head}: mean open-set rejection "
              f"{100.0 - auc:.2f}%  area-under-cdf {auc:.2f}"
              if auc is not None else f"{head}: no open-set experiments")
    print(f"wrote {len(written)} report files to {outdir}")
    return 0


def cmd_serve(args) -> int:
    cfg = _config_from_args(args)
    if args.port is not None:
        cfg.service.port = args.port
    lcfg = cfg.lifecycle
    dep = Deployment(args.state_dir, retention=lcfg.retention)
    if dep.serving_info() is None:
        raise DataError(f"no SERVING pointer under {args.state_dir}; "
                        f"run `adaptids train --state-dir` first")
    base = load_manifest(args.base_manifest) if args.base_manifest else []
    manager = LifecycleManager(
        dep, base, cfg.train.to_train_config(),
        cfg=LifecycleConfig(
            buffer_capacity=lcfg.buffer_capacity,
            buffer_trigger=lcfg.buffer_trigger, k_max=lcfg.k_max,
            cluster_seed=lcfg.cluster_seed, retention=lcfg.retention,
            benign_label=(lcfg.benign_label if lcfg.include_benign
                          else None),
            min_val_accuracy=lcfg.min_val_accuracy,
            val_fraction=lcfg.val_fraction,
            posttrain_epochs=lcfg.posttrain_epochs,
            pull_weight=lcfg.pull_weight,
            retrain_seed=lcfg.retrain_seed))
    service = IdsService(manager, cfg.service, report_dir=args.report_dir)
    service.start()
    print(f"serving on {service.url}")
    if args.ingest_manifest:
        service.feed(load_manifest(args.ingest_manifest),
                     interval_s=args.interval)
    elif args.ingest_pcap:
        service.feed(pcap_to_flows(args.ingest_pcap, label="?"),
                     interval_s=args.interval)
    elif args.ingest_synthetic:
        profiles = (load_profiles(cfg.data.profiles_path)
                    if cfg.data.profiles_path
                    else default_profile_pool(cfg.data.pool_size))
        service.feed(generate_synthetic(profiles, args.ingest_synthetic,
                                        cfg.data.seed + 99),
                     interval_s=args.interval)
    service.serve_forever()
    return 0


def cmd_label(args) -> int:
    headers = {"Content-Type": "application/json"}
    if args.token:
        headers["X-Auth-Token"] = args.token
    base = args.url.rstrip("/")
    if args.list:
        req = urllib.request.Request(base + "/clusters", headers=headers)
        with urllib.request.urlopen(req, timeout=30) as resp:
            print(resp.read().decode("utf-8"))
        return 0
    if args.cluster is None or not args.category:
        raise ConfigError("label needs --cluster and --category "
                          "(or --list to view the queue)")
    body = {"category": args.category}
    if args.name:
        body["name"] = args.name
    if args.analyst:
        body["analyst"] = args.analyst
    req = urllib.request.Request(
        f"{base}/clusters/{args.cluster}/label",
        data=json.dumps(body).encode("utf-8"), headers=headers,
        method="POST")
    try:
        with urllib.request.urlopen(req, timeout=30) as resp:
            print(resp.read().decode("utf-8"))
    except urllib.error.HTTPError as exc:
        detail = exc.read().decode("utf-8", errors="replace")
        raise DataError(f"service answered {exc.code}: {detail}") from None
    if args.retrain:
        req = urllib.request.Request(base + "/retrain", data=b"{}",
                                     headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=30) as resp:
                print(resp.read().decode("utf-8"))
        except urllib.error.HTTPError as exc:
            detail = exc.read().decode("utf-8", errors="replace")
            raise DataError(f"service answered {exc.code}: {detail}") \
                from None
    return 0


# ---------------------------------------------------------------------------
# argument wiring

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adaptids",
        description="Open-set intrusion detection over flow tensors")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="debug logging")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("ingest", help="pcap to flow manifest")
    p.add_argument("--pcap", required=True)
    p.add_argument("--label", required=True,
                   help="label recorded for every flow in the capture")
    p.add_argument("--out", required=True)
    p.add_argument("--no-mask", action="store_true",
                   help="keep address and checksum bytes")
    p.add_argument("--idle-timeout", type=float, default=60.0)
    p.set_defaults(fn=cmd_ingest)

    p = sub.add_parser("train", help="train a detector")
    p.add_argument("--config")
    p.add_argument("--manifest", action="append",
                   help="flow manifest; repeatable")
    p.add_argument("--head", choices=["doc", "docpp", "openmax"])
    p.add_argument("--out", help="checkpoint file to write")
    p.add_argument("--state-dir", help="publish into a deployment dir")
    p.add_argument("--posttrain-epochs", type=int, default=0)
    p.add_argument("--val-fraction", type=float, default=0.0)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on manifests")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", help="known-class flows")
    p.add_argument("--novelty-manifest", help="never-seen flows")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("cluster", help="cluster flows in signature space")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="JSONL output, - for stdout")
    p.add_argument("--k-max", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_cluster)

    p = sub.add_parser("posttrain", help="centroid-pull refinement")
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--pull-weight", type=float, default=0.1)
    p.set_defaults(fn=cmd_posttrain)

    p = sub.add_parser("experiment", help="run the evaluation grid")
    p.add_argument("--config")
    p.add_argument("--outdir")
    p.set_defaults(fn=cmd_experiment)

    p = sub.add_parser("serve", help="run the detection service")
    p.add_argument("--config")
    p.add_argument("--state-dir", required=True)
    p.add_argument("--port", type=int)
    p.add_argument("--base-manifest",
                   help="training flows carried into retrains")
    p.add_argument("--ingest-manifest", help="stream these flows once")
    p.add_argument("--ingest-pcap", help="stream a capture once")
    p.add_argument("--ingest-synthetic", type=int,
                   help="stream N synthetic flows per pool class")
    p.add_argument("--interval", type=float, default=0.0,
                   help="seconds between streamed flows")
    p.add_argument("--report-dir", help="where GET /report/latest looks")
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("label", help="headless analyst decisions")
    p.add_argument("--url", required=True)
    p.add_argument("--list", action="store_true",
                   help="print the cluster queue and exit")
    p.add_argument("--cluster", type=int)
    p.add_argument("--category",
                   choices=["MALICIOUS", "UNSEEN_BENIGN",
                            "TEMPORARY_ANOMALY"])
    p.add_argument("--name", help="new class name for MALICIOUS")
    p.add_argument("--analyst", default="")
    p.add_argument("--token")
    p.add_argument("--retrain", action="store_true",
                   help="trigger a retrain after the decision")
    p.set_defaults(fn=cmd_label)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except TrainingError as exc:
        print(f"training failure: {exc}", file=sys.stderr)
        return 3
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
