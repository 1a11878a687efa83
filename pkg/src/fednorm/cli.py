"""Command-line harness: `fednorm run|toy-shift|partition <config>` and
`fednorm check-props --seed S --trials T`, plus `fednorm bench` for the
kernel backend comparison.

Every run directory gets a resolved-config snapshot sufficient to
reproduce the run bit-for-bit.
"""

import argparse
import sys
from pathlib import Path

from . import config as config_mod
from . import data as data_mod
from . import diagnostics as diag
from . import fed, kernels, models, props
from .fed import derive_seed


def _load_datasets(cfg):
    if cfg.dataset == "synthetic":
        # one draw, then split: train and test must share class templates
        full = data_mod.make_synthetic(
            cfg.synthetic_samples + cfg.synthetic_test_samples,
            derive_seed(cfg.seed, "synthetic"),
            num_classes=cfg.synthetic_classes, shape=cfg.shape(),
            noise=cfg.synthetic_noise,
        )
        return data_mod.split_dataset(full, cfg.synthetic_samples)
    directory = cfg.resolved_data_dir()
    if not directory:
        raise config_mod.ConfigError(
            f"dataset {cfg.dataset!r} needs data_dir (or FEDNORM_DATA_DIR)"
        )
    loader = data_mod.load_cifar10 if cfg.dataset == "cifar10" else data_mod.load_mnist
    return loader(directory, "train"), loader(directory, "test")


def _build_model_fn(cfg, train):
    input_shape = train.images.shape[1:]

    def build(kind, seed):
        if cfg.model == "miniresnet":
            return models.build_miniresnet(kind, input_shape=input_shape,
                                           num_classes=train.class_count, seed=seed,
                                           eps=cfg.norm_eps, momentum=cfg.norm_momentum)
        return models.build_cnn(kind, input_shape=input_shape,
                                num_classes=train.class_count, seed=seed,
                                eps=cfg.norm_eps, momentum=cfg.norm_momentum)

    return build


def _partition(cfg, train):
    return data_mod.partition_noniid(
        train, cfg.num_devices, cfg.classes_per_device, cfg.samples_per_class,
        derive_seed(cfg.seed, "partition"),
    )


def cmd_run(cfg):
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config_mod.dump_config(cfg, out / "config.resolved")
    train, test = _load_datasets(cfg)
    manifest = _partition(cfg, train)
    fed_cfg = fed.FedConfig(
        num_devices=cfg.num_devices,
        devices_per_round=cfg.devices_per_round,
        local_epochs=cfg.local_epochs,
        batch_size=cfg.batch_size,
        learning_rate=cfg.learning_rate,
        total_rounds=cfg.total_rounds,
        norm_kind=cfg.norm_kind(),
        model=cfg.model,
        seed=cfg.seed,
        eval_every=cfg.eval_every,
        threads=cfg.threads,
    )
    with open(out / "metrics.jsonl", "w") as sink:
        _, final_model = fed.run_federated(
            fed_cfg, train, manifest, test,
            build_model=_build_model_fn(cfg, train),
            record_sink=lambda rec: sink.write(rec.to_json() + "\n"),
        )
    models.save_checkpoint(final_model, out / "global.ckpt")
    acc, loss = fed.evaluate(final_model, test)
    print(f"final accuracy {acc:.4f}, loss {loss:.4f} ({cfg.total_rounds} rounds, "
          f"norm={cfg.norm}, backend={kernels.BACKEND})")
    return 0


def cmd_toy_shift(cfg):
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config_mod.dump_config(cfg, out / "config.resolved")
    report, rows = diag.toy_shift_experiment(
        cfg.delta, cfg.steps, cfg.seed, probe_size=cfg.probe_batch
    )
    diag.write_stats_csv(report, out / "shift_stats.csv")
    diag.write_histograms_csv(rows, out / "histograms.csv")
    diag.write_divergence_json(report, out / "divergence.json")
    for layer in report.layers:
        print(f"{layer}: pre divergence {report.scalar(layer, 'pre'):.4f}, "
              f"post divergence {report.scalar(layer, 'post'):.4f}")
    return 0


def cmd_check_props(seed, trials):
    results = props.run_suite(seed, trials)
    failed = 0
    for r in results:
        mark = "PASS" if r.ok else "FAIL"
        print(f"{mark}  {r.name:<36} value={r.value:.3e} bound={r.bound:.1e}  {r.detail}")
        failed += not r.ok
    return 1 if failed else 0


def cmd_partition(cfg):
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, _ = _load_datasets(cfg)
    manifest = _partition(cfg, train)
    path = out / "partition.tsv"
    data_mod.save_manifest(manifest, path)
    print(f"wrote {path} ({manifest.num_devices} devices)")
    return 0


def cmd_bench(sizes, repeats):
    from . import bench

    bench.run(sizes=sizes, repeats=repeats)
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(prog="fednorm")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("run", "toy-shift", "partition"):
        p = sub.add_parser(name)
        p.add_argument("config", help="flat key = value config file")
    p = sub.add_parser("check-props")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=100)
    p = sub.add_parser("bench")
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args(argv)

    try:
        if args.command == "check-props":
            return cmd_check_props(args.seed, args.trials)
        if args.command == "bench":
            return cmd_bench(args.batch, args.repeats)
        cfg = config_mod.parse_config(args.config)
        if args.command == "run":
            return cmd_run(cfg)
        if args.command == "toy-shift":
            return cmd_toy_shift(cfg)
        return cmd_partition(cfg)
    except (config_mod.ConfigError, data_mod.FormatError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
