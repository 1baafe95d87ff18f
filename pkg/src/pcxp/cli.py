"""Command-line entry points.

Exit codes: 0 success, 1 usage or configuration problem, 2 broken or
missing data/checkpoints, 3 numeric failure (non-finite values).
"""

from __future__ import annotations

import argparse
import json
import sys

from .config import Settings, load_settings
from .errors import CheckpointError, ConfigError, DataError, NumericError, PcxpError


def _add_config_args(p: argparse.ArgumentParser):
    p.add_argument("--config", default=None, help="INI config file")
    p.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override one config value (repeatable)",
    )


def _settings(args) -> Settings:
    triples = []
    for item in args.overrides:
        try:
            dotted, value = item.split("=", 1)
            section, key = dotted.split(".", 1)
        except ValueError:
            raise ConfigError(f"--set wants SECTION.KEY=VALUE, got {item!r}")
        triples.append((section.strip(), key.strip(), value))
    return load_settings(args.config, triples)


def _data_dir(args, settings: Settings) -> str:
    path = getattr(args, "data", None) or settings.paths.get("data")
    if not path:
        raise ConfigError("no dataset directory: pass --data or set [paths] data")
    return path


def _emit_report(report, args):
    text = report.to_json()
    sys.stdout.write(text)
    if getattr(args, "report", None):
        with open(args.report, "w") as fh:
            fh.write(text)


def _cmd_gen_data(args) -> int:
    from .geom import gen_dataset

    settings = _settings(args)
    d = settings.data
    manifest = gen_dataset(
        args.out,
        args.seed,
        train_per_class=d.train_per_class,
        test_per_class=d.test_per_class,
        n_points=d.n_points,
        noise_sigma=d.noise_sigma,
        scale_jitter=d.scale_jitter,
    )
    print(manifest)
    return 0


def _cmd_pretrain(args) -> int:
    from .train import pretrain

    settings = _settings(args)
    run = pretrain(
        settings,
        _data_dir(args, settings),
        args.out,
        resume=args.resume,
        stop_after=args.stop_after,
    )
    summary = {k: run[k] for k in ("config_hash", "epochs_run", "warmup", "final")}
    print(json.dumps(summary, sort_keys=True, indent=1))
    return 0


def _cmd_finetune(args) -> int:
    import os

    from . import evalharness as E
    from .geom import load_dataset

    settings = _settings(args)
    dataset = load_dataset(_data_dir(args, settings))
    model = E.load_backbone(args.ckpt, settings)
    head = E.finetune(model, dataset, args.protocol, settings)
    out = args.out or os.path.join(
        os.path.dirname(os.path.abspath(args.ckpt)), f"finetuned_{args.protocol}.pcxp"
    )
    E.save_finetuned(out, model, head)
    report = E.evaluate(model, head, dataset, "test", settings, args.protocol)
    _emit_report(report, args)
    print(out, file=sys.stderr)
    return 0


def _cmd_eval(args) -> int:
    from . import evalharness as E
    from .geom import load_dataset

    settings = _settings(args)
    dataset = load_dataset(_data_dir(args, settings))
    model, head = E.split_finetuned(args.ckpt, settings)
    protocol = args.protocol or E.infer_protocol(head)
    report = E.evaluate(model, head, dataset, args.split, settings, protocol)
    _emit_report(report, args)
    return 0


def _cmd_fewshot(args) -> int:
    from . import evalharness as E
    from .geom import load_dataset

    settings = _settings(args)
    dataset = load_dataset(_data_dir(args, settings))
    model = E.load_backbone(args.ckpt, settings)
    spec = E.EpisodeSpec(way=args.way, shot=args.shot, query=args.query, episodes=args.episodes)
    report = E.few_shot(model, dataset, spec, settings)
    _emit_report(report, args)
    return 0


def _cmd_render(args) -> int:
    from .geom import normalize, read_xyz
    from .render import RenderConfig, render_cloud, write_ppm

    cloud = normalize(read_xyz(getattr(args, "in")))
    raster = render_cloud(cloud, args.yaw, RenderConfig())
    write_ppm(args.out, raster)
    print(args.out)
    return 0


def _cmd_params(args) -> int:
    from .backbone import count_model_params
    from .config import model_preset

    cfg = model_preset(args.preset)
    count = count_model_params(cfg, phase="ssrl")
    width = max(len(k) for k in list(count.by_owner) + ["trainable"]) + 2
    print(f"preset: {args.preset}")
    for owner, n in count.by_owner.items():
        print(f"{owner:<{width}}{n}")
    print(f"{'total':<{width}}{count.total}")
    print(f"{'trainable':<{width}}{count.trainable}")
    print(f"{'fraction':<{width}}{100.0 * count.trainable_fraction:.4f}%")
    return 0


def _cmd_gradcheck(args) -> int:
    from .train import gradcheck

    args.overrides = [f"model.preset={args.preset}"] + args.overrides
    settings = _settings(args)
    report = gradcheck(settings)
    print(json.dumps(report, sort_keys=True, indent=1))
    return 0 if report["passed"] else 3


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pcxp", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic shape dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    _add_config_args(p)
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("pretrain", help="warm-up plus self-supervised pre-training")
    _add_config_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--stop-after", type=int, default=None, metavar="EPOCHS")
    p.set_defaults(fn=_cmd_pretrain)

    p = sub.add_parser("finetune", help="fit a classification protocol on a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--protocol", required=True, choices=("full", "linear", "mlp3"))
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None, help="finetuned checkpoint path")
    p.add_argument("--report", default=None)
    _add_config_args(p)
    p.set_defaults(fn=_cmd_finetune)

    p = sub.add_parser("eval", help="score a finetuned checkpoint on a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--protocol", default=None, choices=("full", "linear", "mlp3"))
    p.add_argument("--report", default=None)
    _add_config_args(p)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("fewshot", help="episodic w-way s-shot evaluation")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--way", type=int, required=True)
    p.add_argument("--shot", type=int, required=True)
    p.add_argument("--episodes", type=int, required=True)
    p.add_argument("--query", type=int, default=10)
    p.add_argument("--data", default=None)
    p.add_argument("--report", default=None)
    _add_config_args(p)
    p.set_defaults(fn=_cmd_fewshot)

    p = sub.add_parser("render", help="rasterize a point cloud to PPM")
    p.add_argument("--in", required=True, dest="in")
    p.add_argument("--yaw", type=float, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_render)

    p = sub.add_parser("params", help="parameter accounting for a preset")
    p.add_argument("--preset", required=True, choices=("paper", "desk"))
    p.set_defaults(fn=_cmd_params)

    p = sub.add_parser("gradcheck", help="finite-difference check of the total loss")
    p.add_argument("--preset", default="desk", choices=("desk",))
    _add_config_args(p)
    p.set_defaults(fn=_cmd_gradcheck)

    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except (DataError, CheckpointError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return 3
    except PcxpError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
