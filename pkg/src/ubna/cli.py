"""Command line entry point: ``ubna {pretrain,adapt,sweep,eval,report}``.

Every run writes the fully resolved configuration to ``<out>/config.ini``;
passing that file back with ``--config`` reproduces the run byte for byte.

Exit codes: 0 success, 2 usage error, 3 runtime failure.
"""
import argparse
import configparser
import csv
import glob
import logging
import os
import sys

import numpy as np

from . import modelio, scenarios
from .adapt import (
    FewShot,
    Offline,
    Online,
    Segment,
    adabn_recompute,
    schedule_for,
    sequential_adapt,
    ubna_adapt,
)
from .batchnorm import NORMALIZE_BATCH, NORMALIZE_RUNNING
from .datagen import dataset_to_mapping, load_dataset_spec
from .errors import InvalidInputError, UBNAError
from .metrics import evaluate_model, format_table, write_metrics_csv
from .model import Architecture, Model
from .pretrain import PretrainConfig, pretrain

log = logging.getLogger("ubna")

EXIT_USAGE = 2
EXIT_RUNTIME = 3

METHODS = ("ubna0", "ubna", "ubna+", "adabn", "none")
PROTOCOLS = ("offline", "online", "fewshot", "sequential")


class UsageError(Exception):
    pass


def default_config():
    """The built-in configuration: the colour-cast domain-shift task, seed 0."""
    task = scenarios.domain_shift_task(0)
    cfg = configparser.ConfigParser()
    cfg["run"] = {"seed": "0", "classes": ""}
    cfg["source"] = dataset_to_mapping(task.source)
    cfg["target"] = dataset_to_mapping(task.target)
    cfg["eval"] = dataset_to_mapping(task.target_eval)
    arch = task.architecture
    cfg["model"] = {
        "hidden": ",".join(str(h) for h in arch.hidden),
        "input_bn": str(arch.input_bn).lower(),
        "eps": repr(arch.eps),
    }
    p = task.pretrain
    cfg["pretrain"] = {
        "steps": str(p.steps),
        "learning_rate": repr(p.learning_rate),
        "batch_size": str(p.batch_size),
        "bn_momentum": repr(p.bn_momentum),
        "class_weights": "uniform",
    }
    cfg["adapt"] = {
        "method": "ubna",
        "protocol": "offline",
        "eta0": "0.1",
        "alpha_batch": "",
        "alpha_layer": "",
        "steps": "50",
        "batch_size": "6",
        "first_step_index": "1",
        "normalize_with": NORMALIZE_RUNNING,
        "frame_period": "0.06",
        "sequence": "target,source",
    }
    cfg["sweep"] = {"alpha_batch": "0.0,0.02,0.08,0.2", "alpha_layer": "0.0"}
    return cfg


def _read_config(path):
    if path is None:
        return default_config()
    parser = configparser.ConfigParser()
    try:
        if not parser.read(path):
            raise UsageError(f"cannot read config file {path}")
    except configparser.Error as exc:
        raise UsageError(f"malformed config file {path}: {exc}") from None
    # sections the file leaves out fall back to built-in settings, datasets excepted
    defaults = default_config()
    for section in ("run", "model", "pretrain", "adapt", "sweep"):
        if not parser.has_section(section):
            parser[section] = dict(defaults[section])
        else:
            for key, value in defaults[section].items():
                if not parser.has_option(section, key):
                    parser[section][key] = value
    return parser


def _dataset(cfg, section):
    if not cfg.has_section(section):
        raise UsageError(f"config has no [{section}] dataset section")
    try:
        return load_dataset_spec(cfg, section)
    except InvalidInputError as exc:
        raise UsageError(str(exc)) from None


def _resolve_datasets(cfg, sections):
    """Replace dataset sections (which may use ``base =``) with fully expanded ones."""
    for section in sections:
        if cfg.has_section(section):
            ds = _dataset(cfg, section)
            cfg.remove_section(section)
            cfg[section] = dataset_to_mapping(ds)


def _float_or_none(text):
    text = (text or "").strip()
    return float(text) if text else None


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _classes(cfg):
    text = cfg.get("run", "classes", fallback="").strip()
    return [int(v) for v in text.split(",")] if text else None


def _apply_common(cfg, args):
    if getattr(args, "seed", None) is not None:
        cfg["run"]["seed"] = str(args.seed)
    if getattr(args, "classes", None) is not None:
        cfg["run"]["classes"] = ",".join(str(c) for c in args.classes)
    adapt = cfg["adapt"]
    for flag, key in (
        ("method", "method"),
        ("protocol", "protocol"),
        ("eta0", "eta0"),
        ("steps", "steps"),
        ("batch_size", "batch_size"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            adapt[key] = str(value)
    for flag in ("alpha_batch", "alpha_layer"):
        value = getattr(args, flag, None)
        if value is not None and not isinstance(value, list):
            adapt[flag] = repr(value)


def _write_config(cfg, out):
    with open(os.path.join(out, "config.ini"), "w") as fh:
        cfg.write(fh)


def _prepare_out(path):
    if not path:
        raise UsageError("--out is required")
    os.makedirs(path, exist_ok=True)
    return path


def _eval_hook(cfg):
    if not cfg.has_section("eval"):
        return None
    ds = _dataset(cfg, "eval")
    images, labels = ds.materialize()
    subset = _classes(cfg)

    def hook(model, step):
        return evaluate_model(model, images, labels, subset)["miou"]

    return hook


# -- subcommands ---------------------------------------------------------------


def cmd_pretrain(args):
    cfg = _read_config(args.config)
    _apply_common(cfg, args)
    out = _prepare_out(args.out)
    source = _dataset(cfg, "source")
    _resolve_datasets(cfg, ("source", "target", "eval"))
    seed = cfg.getint("run", "seed")
    m = cfg["model"]
    arch = Architecture(
        in_channels=3,
        hidden=tuple(int(h) for h in m["hidden"].split(",") if h.strip()),
        num_classes=source.num_classes,
        input_bn=m.getboolean("input_bn"),
        eps=float(m["eps"]),
    )
    p = cfg["pretrain"]
    weights = p.get("class_weights", "uniform").strip()
    if weights == "uniform":
        weights = None
    elif weights != "inverse_frequency":
        weights = tuple(float(v) for v in weights.split(","))
    pcfg = PretrainConfig(
        steps=p.getint("steps"),
        learning_rate=p.getfloat("learning_rate"),
        batch_size=p.getint("batch_size"),
        bn_momentum=p.getfloat("bn_momentum"),
        class_weights=weights,
        seed=seed,
    )
    model = Model.build(arch, seed=seed)
    train_log = pretrain(model, source, pcfg)
    modelio.save(model, os.path.join(out, "model.ckpt"))
    train_log.to_csv(os.path.join(out, "train_log.csv"))
    _write_config(cfg, out)
    if len(train_log):
        tail = train_log.accuracies[-50:]
        print(f"pretrained {pcfg.steps} steps; final loss {train_log.losses[-1]:.4f}, "
              f"source accuracy (last {len(tail)} steps) {np.mean(tail):.4f}")
    return 0


def _load_checkpoint(path):
    if not path:
        raise UsageError("--checkpoint is required")
    if not os.path.exists(path):
        raise UsageError(f"checkpoint {path} does not exist")
    return modelio.load(path)


def _schedule(cfg, method, alpha_batch=None, alpha_layer=None):
    a = cfg["adapt"]
    return schedule_for(
        method,
        eta0=_float_or_none(a.get("eta0")),
        alpha_batch=alpha_batch if alpha_batch is not None else _float_or_none(a.get("alpha_batch")),
        alpha_layer=alpha_layer if alpha_layer is not None else _float_or_none(a.get("alpha_layer")),
        num_steps=a.getint("steps"),
        first_step_index=a.getint("first_step_index"),
    )


def _protocol(cfg, name, data, seed):
    a = cfg["adapt"]
    b = a.getint("batch_size")
    if name == "offline":
        return Offline(b, seed)
    if name == "online":
        return Online(b, a.getfloat("frame_period"))
    if name == "fewshot":
        return FewShot.sample(len(data), b, seed)
    raise UsageError(f"unknown protocol {name!r}")


def cmd_adapt(args):
    cfg = _read_config(args.config)
    _apply_common(cfg, args)
    out = _prepare_out(args.out)
    model = _load_checkpoint(args.checkpoint)
    a = cfg["adapt"]
    method, protocol = a["method"], a["protocol"]
    if method not in METHODS:
        raise UsageError(f"unknown method {method!r}")
    if protocol not in PROTOCOLS:
        raise UsageError(f"unknown protocol {protocol!r}")
    if a["normalize_with"] not in (NORMALIZE_RUNNING, NORMALIZE_BATCH):
        raise UsageError(f"unknown normalize_with {a['normalize_with']!r}")
    target = _dataset(cfg, "target")
    sequence = [s.strip() for s in a.get("sequence", "").split(",") if s.strip()]
    dataset_sections = {"source", "target", "eval"} | set(sequence if protocol == "sequential" else [])
    _resolve_datasets(cfg, sorted(dataset_sections))
    seed = cfg.getint("run", "seed")
    hook = _eval_hook(cfg)
    traces = []

    if method == "none":
        pass
    elif method == "adabn":
        adabn_recompute(model, target, a.getint("batch_size"))
    elif protocol == "sequential":
        if not sequence:
            raise UsageError("sequential protocol needs [adapt] sequence = section,section,...")
        segments = []
        for i, section in enumerate(sequence):
            data = _dataset(cfg, section)
            segments.append(Segment(data, _schedule(cfg, method), Offline(a.getint("batch_size"), seed + i)))
        traces = sequential_adapt(model, segments, hook, a["normalize_with"])
    else:
        schedule = _schedule(cfg, method)
        proto = _protocol(cfg, protocol, target, seed)
        traces = [ubna_adapt(model, target, schedule, proto, hook, a["normalize_with"])]

    modelio.save(model, os.path.join(out, "model.ckpt"))
    if len(traces) == 1:
        traces[0].to_csv(os.path.join(out, "trace.csv"))
    for i, trace in enumerate(traces if len(traces) > 1 else [], start=1):
        trace.to_csv(os.path.join(out, f"trace_segment_{i}.csv"))
    _write_config(cfg, out)
    if traces and traces[-1].records and traces[-1].records[-1].metric is not None:
        print(f"{method}/{protocol}: final mIoU {100 * traces[-1].records[-1].metric:.2f}")
    return 0


def cmd_sweep(args):
    cfg = _read_config(args.config)
    _apply_common(cfg, args)
    s = cfg["sweep"]
    if args.alpha_batch is not None:
        s["alpha_batch"] = ",".join(repr(v) for v in args.alpha_batch)
    if args.alpha_layer is not None:
        s["alpha_layer"] = ",".join(repr(v) for v in args.alpha_layer)
    grid_b = _float_list(s.get("alpha_batch", ""))
    grid_l = _float_list(s.get("alpha_layer", "")) or [0.0]
    if not grid_b:
        raise UsageError("sweep grid is empty")
    out = _prepare_out(args.out)
    base_model = _load_checkpoint(args.checkpoint)
    target = _dataset(cfg, "target")
    _resolve_datasets(cfg, ("source", "target", "eval"))
    seed = cfg.getint("run", "seed")
    hook = _eval_hook(cfg)
    protocol = cfg["adapt"]["protocol"]
    if protocol == "sequential":
        raise UsageError("sweeps support offline, online and fewshot protocols")
    rows = []
    for ab in grid_b:
        for al in grid_l:
            model = base_model.copy()
            schedule = _schedule(cfg, "ubna", alpha_batch=ab, alpha_layer=al)
            proto = _protocol(cfg, protocol, target, seed)
            trace = ubna_adapt(model, target, schedule, proto, hook, cfg["adapt"]["normalize_with"])
            name = f"trace_ab{ab:g}_al{al:g}.csv"
            trace.to_csv(os.path.join(out, name))
            final = trace.records[-1].metric if trace.records else None
            eta_sum = sum(trace.etas)
            rows.append([repr(ab), repr(al), "" if final is None else repr(final), repr(eta_sum), name])
    with open(os.path.join(out, "summary.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["alpha_batch", "alpha_layer", "final_metric", "eta_sum", "trace"])
        w.writerows(rows)
    _write_config(cfg, out)
    print(f"swept {len(rows)} grid points into {out}")
    return 0


def cmd_eval(args):
    cfg = _read_config(args.config)
    _apply_common(cfg, args)
    model = _load_checkpoint(args.checkpoint)
    ds = _dataset(cfg, "eval")
    images, labels = ds.materialize()
    if labels is None or not ds.labeled:
        raise UsageError("evaluation set has no labels")
    subset = _classes(cfg)
    batch_stats = args.baseline == "zhang"
    batch = args.batch_size or cfg["adapt"].getint("batch_size")
    res = evaluate_model(model, images, labels, subset, batch_size=batch if batch_stats else None,
                         batch_stats=batch_stats)
    class_ids = subset if subset is not None else list(range(model.num_classes))
    print(format_table(res["iou"], res["miou"], class_ids))
    print(f"pixel accuracy {100 * res['accuracy']:.2f}")
    if args.out:
        out = _prepare_out(args.out)
        write_metrics_csv(os.path.join(out, "metrics.csv"), res["iou"], res["miou"], class_ids,
                          res["accuracy"])
        _resolve_datasets(cfg, ("source", "target", "eval"))
        _write_config(cfg, out)
    return 0


def _trace_summary(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    metrics = [float(r["metric"]) for r in rows if r.get("metric")]
    if not metrics:
        return {"steps": len(rows), "final": None, "best": None}
    return {"steps": len(rows), "final": metrics[-1], "best": max(metrics)}


def cmd_report(args):
    rows = []
    for run in args.runs:
        if not os.path.isdir(run):
            raise UsageError(f"{run} is not a run directory")
        for path in sorted(glob.glob(os.path.join(run, "trace*.csv"))):
            s = _trace_summary(path)
            rows.append([path, "trace", s["steps"], s["final"], s["best"]])
        metrics_path = os.path.join(run, "metrics.csv")
        if os.path.exists(metrics_path):
            with open(metrics_path, newline="") as fh:
                values = {r[0]: r[1] for r in csv.reader(fh)}
            m = float(values["mIoU"])
            rows.append([metrics_path, "eval", "", m, m])
    if not rows:
        raise UsageError("no traces or metric reports found")
    fmt = lambda v: "" if v is None or v == "" else f"{100 * v:.2f}"  # noqa: E731
    width = max(len(r[0]) for r in rows)
    print(f"{'file'.ljust(width)}  kind   steps  final  best")
    for r in rows:
        print(f"{r[0].ljust(width)}  {r[1]:5}  {str(r[2]):>5}  {fmt(r[3]):>5}  {fmt(r[4]):>5}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["file", "kind", "steps", "final_metric", "best_metric"])
            for r in rows:
                w.writerow([r[0], r[1], r[2], "" if r[3] is None else repr(r[3]),
                            "" if r[4] is None else repr(r[4])])
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="ubna", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, adapt_flags=True):
        p.add_argument("--config", help="INI run configuration (built-in default if omitted)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="run directory for outputs")
        p.add_argument("--classes", type=_int_list, help="class subset for mIoU, e.g. 0,1,3")
        if adapt_flags:
            p.add_argument("--checkpoint", help="input checkpoint")
            p.add_argument("--method", choices=METHODS)
            p.add_argument("--protocol", choices=PROTOCOLS)
            p.add_argument("--eta0", type=float)
            p.add_argument("--steps", type=int)
            p.add_argument("--batch-size", type=int)

    p = sub.add_parser("pretrain", help="supervised pre-training on the source domain")
    common(p, adapt_flags=False)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("adapt", help="adapt BN statistics of a checkpoint to the target domain")
    common(p)
    p.add_argument("--alpha-batch", type=float)
    p.add_argument("--alpha-layer", type=float)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("sweep", help="grid over decay factors, one trace per point")
    common(p)
    p.add_argument("--alpha-batch", type=_float_list, help="comma-separated grid")
    p.add_argument("--alpha-layer", type=_float_list, help="comma-separated grid")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="Eval-mode segmentation metrics of a checkpoint")
    common(p, adapt_flags=False)
    p.add_argument("--checkpoint", help="checkpoint to evaluate")
    p.add_argument("--baseline", choices=("zhang",),
                   help="normalize each test batch with its own statistics instead")
    p.add_argument("--batch-size", type=int, help="test batch size for --baseline zhang")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="summarize traces and metric reports of run directories")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out", help="write the summary as CSV")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    level = os.environ.get("UBNA_LOG_LEVEL", "WARNING").upper()
    if not isinstance(logging.getLevelName(level), int):
        level = "WARNING"
    logging.basicConfig(
        level=level,
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"ubna {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (UBNAError, OSError) as exc:
        print(f"ubna {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
