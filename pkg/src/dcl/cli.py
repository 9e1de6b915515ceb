"""Command-line front door.

Subcommands mirror the two training phases plus plumbing:

    synth-data   write a synthetic dataset (features or glyph images)
    train-gan    phase 1: adversarial training, checkpoint out
    extract      run the discriminator over the dataset -> feature files
    cluster      phase 2: train the head bank on feature files
    evaluate     score predicted labels against ground truth
    pipeline     train-gan -> extract -> cluster -> evaluate
    grad-check   finite-difference verification of every primitive

Every command writes its artifacts plus the resolved config into --out.
Failures print a single machine-parsable JSON line on stderr and exit 1.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import cluster as cl
from . import config as cfgmod
from . import data as datamod
from . import features as featmod
from . import fileio, gan, metrics


def _out_dir(cfg):
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    return out


def _echo_config(cfg, out):
    with open(os.path.join(out, "config.resolved"), "w", encoding="utf-8") as fh:
        fh.write(cfgmod.serialize(cfg))


def _arch_name(cfg, dataset_preset):
    if cfg["arch"] != "auto":
        return cfg["arch"]
    table = {"mnist-mini": "toy-14", "mnist": "mnist-24", "cifar10": "cifar-32"}
    if dataset_preset not in table:
        raise cfgmod.ConfigError(f"no auto architecture for dataset {dataset_preset!r}")
    return table[dataset_preset]


def _load_image_dataset(cfg):
    name = cfg["dataset"]
    if name == "mnist-mini":
        if cfg["mnist_images"]:
            return datamod.mnist_mini_from_idx(
                cfg["mnist_images"], cfg["mnist_labels"], n=int(cfg["data_n"]),
                seed=cfgmod.phase_seed(cfg, "synth"))
        return datamod.synth_digits(n=int(cfg["data_n"]), size=14,
                                    seed=cfgmod.phase_seed(cfg, "synth"))
    if name == "mnist":
        return datamod.load_idx(cfg["mnist_images"], cfg["mnist_labels"] or None,
                                crop=24, preset="mnist")
    if name == "cifar10":
        paths = [p for p in cfg["cifar_files"].split(",") if p]
        if not paths:
            raise cfgmod.ConfigError("cifar10 needs cifar_files=<comma-separated paths>")
        return datamod.load_cifar_bin(paths)
    raise cfgmod.ConfigError(f"dataset {name!r} is not an image dataset")


def _gan_config(cfg, dataset_preset):
    return gan.GanConfig(
        preset=_arch_name(cfg, dataset_preset),
        latent_dim=int(cfg["latent_dim"]),
        batch_size=int(cfg["gan_batch"]),
        iters=int(cfg["gan_iters"]),
        lr=float(cfg["lr"]),
        beta1=float(cfg["beta1"]),
        init_std=float(cfg["init_std"]),
        dropout=float(cfg["disc_dropout"]),
        tau=float(cfg["tau"]),
        sobel=bool(int(cfg["sobel"])),
        seed=cfgmod.phase_seed(cfg, "gan"),
    )


def _cluster_config(cfg):
    spec = cl.PerturbSpec(
        alpha_r=float(cfg["alpha_r"]),
        alpha_adv=float(cfg["alpha_adv"]),
        replicas=int(cfg["replicas"]),
        squared_norm=cfg["norm_mode"] == "squared",
    )
    return cl.ClusterConfig(
        hidden=int(cfg["cluster_hidden"]),
        init_std=float(cfg["cluster_init_std"]),
        lr=float(cfg["cluster_lr"]),
        beta1=float(cfg["beta1"]),
        epochs=int(cfg["cluster_epochs"]),
        batch_size=int(cfg["cluster_batch"]),
        lam=float(cfg["lambda"]),
        spec=spec,
        seed=cfgmod.phase_seed(cfg, "cluster"),
    )


def _bank_heads(cfg):
    dp, do = cfgmod.head_deltas(cfg)
    k = int(cfg["k"])
    k_prime = int(cfg["k_prime"]) or 5 * k
    return cl.default_heads(k, k_prime=k_prime, n_primary=int(cfg["heads"]),
                            n_over=int(cfg["overcluster_heads"]),
                            delta_primary=dp, delta_over=do)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth_data(cfg):
    out = _out_dir(cfg)
    if cfg["dataset"] == "gauss-3":
        spec = datamod.gauss_spec(
            k=int(cfg["k"]), dim=int(cfg["synth_dim"]), std=float(cfg["synth_std"]),
            sep=float(cfg["synth_sep"]), weights=cfgmod.synth_weights(cfg),
            n=int(cfg["synth_n"]), seed=cfgmod.phase_seed(cfg, "synth"))
        values, labels = datamod.synth_gaussians(spec)
        fileio.write_features(os.path.join(out, "features.dcfm"), values,
                              0.0, spec.seed)
        fileio.write_labels(os.path.join(out, "labels.dclb"), labels)
    elif cfg["dataset"] == "mnist-mini":
        ds = _load_image_dataset(cfg)
        datamod.write_idx_images(os.path.join(out, "images.idx"),
                                 datamod.unscale(ds.images[:, 0]))
        datamod.write_idx_labels(os.path.join(out, "labels.idx"), ds.labels)
        fileio.write_labels(os.path.join(out, "labels.dclb"), ds.labels)
    else:
        raise cfgmod.ConfigError(f"synth-data supports gauss-3 and mnist-mini, "
                                 f"not {cfg['dataset']!r}")
    _echo_config(cfg, out)
    return 0


def cmd_train_gan(cfg, dataset=None):
    out = _out_dir(cfg)
    ds = dataset if dataset is not None else _load_image_dataset(cfg)
    state = gan.train_gan(_gan_config(cfg, ds.preset), ds)
    gan.save_checkpoint(os.path.join(out, "gan.dcgk"), state)
    with open(os.path.join(out, "gan_losses.jsonl"), "w", encoding="utf-8") as fh:
        for record in state.history:
            fileio.append_jsonl(fh, record)
    _echo_config(cfg, out)
    return state


def cmd_extract(cfg, disc=None, dataset=None):
    out = _out_dir(cfg)
    ds = dataset if dataset is not None else _load_image_dataset(cfg)
    if disc is None:
        path = cfg["checkpoint"] or os.path.join(out, "gan.dcgk")
        disc = gan.load_discriminator(path, _gan_config(cfg, ds.preset))
    clean = featmod.extract_features(disc, ds, 0.0,
                                     seed=cfgmod.phase_seed(cfg, "extract"))
    prime = featmod.extract_features(disc, ds, float(cfg["feature_dropout"]),
                                     seed=cfgmod.phase_seed(cfg, "extract_prime"))
    featmod.save_features(os.path.join(out, "features.dcfm"), clean)
    featmod.save_features(os.path.join(out, "features_prime.dcfm"), prime)
    if ds.labels is not None:
        fileio.write_labels(os.path.join(out, "labels.dclb"), ds.labels)
    if int(cfg["pca_csv"]):
        xy = metrics.pca_2d(clean.values)
        rows = [(f"{x:.6f}", f"{y:.6f}") + ((int(lab),) if ds.labels is not None else ())
                for (x, y), lab in zip(xy, ds.labels if ds.labels is not None
                                       else np.zeros(len(xy), dtype=int))]
        header = ["x", "y"] + (["label"] if ds.labels is not None else [])
        fileio.write_csv(os.path.join(out, "pca2d.csv"), header, rows)
    _echo_config(cfg, out)
    return clean, prime


def cmd_cluster(cfg, feats=None, feats_prime=None, labels=None, refresh=None):
    out = _out_dir(cfg)
    if feats is None:
        path = cfg["features"] or os.path.join(out, "features.dcfm")
        feats = featmod.load_features(path).values
    if feats_prime is None:
        path = cfg["features_prime"] or os.path.join(out, "features_prime.dcfm")
        feats_prime = featmod.load_features(path).values if os.path.exists(path) else None
    if labels is None:
        path = cfg["labels_file"] or os.path.join(out, "labels.dclb")
        labels = fileio.read_labels(path) if os.path.exists(path) else None

    ccfg = _cluster_config(cfg)
    bank = cl.build_bank(feats.shape[1], _bank_heads(cfg), ccfg)
    log_path = os.path.join(out, "metrics.jsonl")
    with open(log_path, "w", encoding="utf-8") as fh:
        fileio.append_jsonl(fh, {"config": {k: cfg[k] for k in cfgmod.DEFAULTS}})

        def on_epoch(epoch, breakdown):
            best = cl.select_best_head(breakdown)
            record = {
                "epoch": epoch,
                "heads": [t.as_dict() for t in breakdown.heads],
                "best_head": best,
            }
            if labels is not None:
                pred = cl.assign_clusters(bank, best, feats)
                record["acc"] = metrics.clustering_accuracy(pred, labels).acc
            fileio.append_jsonl(fh, record)

        history = cl.train_bank(bank, feats, feats_prime, ccfg,
                                refresh=refresh, on_epoch=on_epoch)
    best = cl.select_best_head(history[-1])
    assignments = cl.assign_clusters(bank, best, feats)
    fileio.write_labels(os.path.join(out, "assignments.dclb"), assignments)
    _echo_config(cfg, out)
    return bank, history, assignments


def cmd_evaluate(cfg, pred=None, truth=None):
    out = _out_dir(cfg)
    if pred is None:
        pred = fileio.read_labels(cfg["pred_file"] or os.path.join(out, "assignments.dclb"))
    if truth is None:
        truth = fileio.read_labels(cfg["labels_file"] or os.path.join(out, "labels.dclb"))
    report = metrics.clustering_accuracy(pred, truth)
    fileio.write_json(os.path.join(out, "eval.json"), report.as_dict())
    _echo_config(cfg, out)
    return report


def cmd_pipeline(cfg):
    out = _out_dir(cfg)
    ds = _load_image_dataset(cfg)
    state = cmd_train_gan(cfg, dataset=ds)
    clean, prime = cmd_extract(cfg, disc=state.disc, dataset=ds)

    refresh = None
    if int(cfg["feature_refresh"]):
        base = cfgmod.phase_seed(cfg, "extract_prime")
        rate = float(cfg["feature_dropout"])

        def refresh(epoch):
            return featmod.extract_features(state.disc, ds, rate,
                                            seed=base + 1 + epoch).values

    cmd_cluster(cfg, feats=clean.values, feats_prime=prime.values,
                labels=ds.labels, refresh=refresh)
    if ds.labels is not None:
        report = cmd_evaluate(cfg, truth=ds.labels)
        return report
    return None


def cmd_grad_check(cfg):
    from .gradcheck import primitive_suite
    report = primitive_suite(int(cfg["seed"]))
    report["cluster_objective"] = _objective_fd_error(int(cfg["seed"]))
    worst = max(report.values())
    for name in sorted(report):
        print(f"{name}: {report[name]:.3e}")
    print(f"max relative error: {worst:.3e}")
    return 0 if worst <= 1e-6 else 1


def _objective_fd_error(seed):
    """Finite-difference check of the full bank objective w.r.t. parameters.

    The consistency terms train against constant targets (the clean
    predictions) and constant adversarial offsets, so the oracle freezes both
    and differentiates the same surface the backward pass defines.
    """
    from .gradcheck import numerical_gradient, relative_error
    from .autodiff import Tape, backward

    rng = np.random.default_rng(seed)
    m = rng.standard_normal((6, 3))
    m_prime = m + 0.05 * rng.standard_normal(m.shape)
    heads = [cl.ClusterHead(2, 1e-4, "primary"), cl.ClusterHead(4, 1e-2, "overcluster")]
    spec = cl.PerturbSpec(alpha_r=0.4, alpha_adv=0.25, replicas=2)
    bank = cl.ClusterBank(3, 5, heads, np.random.default_rng(seed + 1),
                          init_std=0.5, dtype=np.float64)
    params = bank.params()
    r_advs = [cl.vat_perturbation(np.tile(m, (spec.replicas, 1)), bank, j, spec,
                                  np.random.default_rng(seed + 2 + j))
              for j in range(bank.n_heads)]
    targets = []
    for j in range(bank.n_heads):
        p_clean = bank.probs(m, j)
        targets.append((np.tile(p_clean, (spec.replicas, 1)), p_clean))

    def loss_fn():
        value, _ = cl.bank_loss(m, m_prime, bank, spec, 0.2,
                                r_advs=r_advs, targets=targets)
        return value

    with Tape() as tape:
        loss = loss_fn()
    grads = backward(loss, tape, params)

    worst = 0.0
    for p in params:
        original = p.data.copy()

        def scalar(arr, _p=p, _orig=original):
            _p.data = arr
            value = loss_fn().item()
            _p.data = _orig
            return value

        numeric = numerical_gradient(lambda a: scalar(a), [original], 0)
        worst = max(worst, relative_error(grads[p].data, numeric))
    return worst


COMMANDS = {
    "synth-data": cmd_synth_data,
    "train-gan": cmd_train_gan,
    "extract": cmd_extract,
    "cluster": cmd_cluster,
    "evaluate": cmd_evaluate,
    "pipeline": cmd_pipeline,
    "grad-check": cmd_grad_check,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="dcl", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", default=None, help="key=value config file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="master seed")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        overrides = {}
        for item in args.set:
            if "=" not in item:
                raise cfgmod.ConfigError(f"--set needs KEY=VALUE, got {item!r}")
            key, value = item.split("=", 1)
            overrides[key.strip()] = value.strip()
        if args.out is not None:
            overrides["out"] = args.out
        if args.seed is not None:
            overrides["seed"] = str(args.seed)
        cfg = cfgmod.resolve(args.config, overrides)
        result = COMMANDS[args.command](cfg)
        return int(result) if isinstance(result, int) else 0
    except Exception as exc:  # single-line machine-parsable error record
        record = {"error": type(exc).__name__, "message": str(exc),
                  "command": args.command}
        print(json.dumps(record), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
