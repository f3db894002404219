"""``headflow`` command line.

Exit status: 0 ok, 1 usage/config, 2 input I/O, 3 numerical/degenerate,
4 oracle transport.
"""
import argparse
import copy
import json
import os
import shlex
import sys

import numpy as np

from headflow import __version__, container
from headflow.artifacts import ensure_dir, read_json, sha256_file, write_csv, write_json, write_text
from headflow.attribution import (
    HEADS,
    AttributionResult,
    ENParams,
    SamplingSpec,
    attribute,
    coefficient_ranking,
)
from headflow.errors import ConfigError, HeadflowError, InputError, NumericalError
from headflow.evaluation import (
    COMPLETENESS_BELOW,
    FAITHFULNESS_ABOVE,
    attention_ranking,
    causal_ranking,
    curves,
    head_similarity_and_cluster,
    head_vectors,
    min_components,
    random_ranking,
    sweep,
    theta_attention_pairs,
    write_curves_csv,
    write_headsim_csv,
    write_minheads_csv,
)
from headflow.intervention import BaselineKV, compute_baseline_kv
from headflow.model import (
    WEIGHT_NAMES,
    ModelConfig,
    MultimodalSequence,
    WeightSet,
    forward,
    image_attention_per_head,
    logit_lens_head,
)
from headflow.oracle import CachedOracle, ModelOracle, SubprocessOracle, serve, verify_roundtrip
from headflow.synthetic import (
    ANY_ONE,
    EXCLUSIVE,
    SyntheticModel,
    WiringSpec,
    gen_calibration_pool,
    gen_copyhead_model,
    gen_tasks,
    random_synthetic_model,
    verify_construction,
)
from headflow.tokenflow import (
    image_token_attribution,
    select_core_heads,
    text_token_effects,
    theta_attention_correlation,
    weighted_attention_map,
    write_wmap_csv,
)

DEFAULTS = {
    "paths": {"model": None, "baseline": None, "tasks": None, "heads": None, "out": "headflow_out"},
    "task_index": 0,
    "seed": 0,
    "workers": 1,
    "sampling": {"ablate_fraction": 0.75, "n_samples": 10000, "train_fraction": 0.8, "scheme": "exact"},
    "en": {"alpha": 0.0005, "l1_ratio": 0.5, "max_iter": 1000, "tol": 1e-6},
    "thresholds": {"faithfulness": 0.8, "completeness": 0.2, "token": 0.05},
    "oracle": {"cmd": None, "timeout": 60.0, "retries": 0},
    "eval": {"n_random": 20, "n_clusters": 2},
    "sweep": {
        "faith_thresholds": [0.5, 0.6, 0.7, 0.8, 0.9],
        "comp_thresholds": [0.5, 0.4, 0.3, 0.2, 0.1],
        "fractions": [0.125, 0.25, 0.375, 0.5, 0.625, 0.75, 0.875],
    },
}

ALIASES = {
    "paths.model": ["--model"],
    "paths.baseline": ["--baseline"],
    "paths.tasks": ["--tasks"],
    "paths.heads": ["--heads"],
    "paths.out": ["--out-dir"],
    "task_index": ["--index"],
    "oracle.cmd": ["--oracle-cmd"],
}


# --------------------------------------------------------------------------
# run configuration


def _leaves(d, prefix=""):
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            yield from _leaves(v, key + ".")
        else:
            yield key, v


def _get(cfg, dotted):
    node = cfg
    for part in dotted.split("."):
        node = node[part]
    return node


def _set(cfg, dotted, value):
    parts = dotted.split(".")
    node = cfg
    for part in parts[:-1]:
        node = node[part]
    node[parts[-1]] = value


def _coerce(dotted, value):
    default = _get(DEFAULTS, dotted)
    if value is None:
        return None
    try:
        if isinstance(default, bool):
            return bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, list):
            if isinstance(value, str):
                value = [v for v in value.split(",") if v.strip()]
            return [float(v) for v in value]
    except (TypeError, ValueError):
        raise ConfigError(f"{dotted}: cannot use {value!r}") from None
    return str(value)


def _merge_file(cfg, data, prefix=""):
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    for k, v in data.items():
        key = f"{prefix}{k}"
        try:
            default = _get(DEFAULTS, key)
        except (KeyError, TypeError):
            raise ConfigError(f"unknown config key {key!r}") from None
        if isinstance(default, dict):
            _merge_file(cfg, v, key + ".")
        else:
            _set(cfg, key, _coerce(key, v))


def resolve_config(args):
    """defaults < config file < flags."""
    cfg = copy.deepcopy(DEFAULTS)
    if getattr(args, "config", None):
        _merge_file(cfg, read_json(args.config))
    for key, _ in _leaves(DEFAULTS):
        if key in vars(args):
            _set(cfg, key, _coerce(key, vars(args)[key]))
    for name, value in _leaves(cfg["thresholds"]):
        if not 0.0 < value < 1.0:
            raise ConfigError(f"thresholds.{name}={value} outside (0, 1)")
    if cfg["workers"] < 1:
        raise ConfigError("workers must be >= 1")
    return cfg


def _add_run_flags(p):
    p.add_argument("--config", help="JSON run configuration")
    for key, default in _leaves(DEFAULTS):
        names = ALIASES.get(key, []) + [f"--{key}"]
        p.add_argument(*names, dest=key, default=argparse.SUPPRESS,
                       help=f"(default {default!r})")


def _need(cfg, key):
    path = _get(cfg, key)
    if path is None:
        raise ConfigError(f"--{key} is required")
    if not os.path.exists(path):
        raise InputError(f"{key}: {path} does not exist")
    return path


# --------------------------------------------------------------------------
# file formats


def save_model(path, model):
    tensors = model.weights.tensors()
    tensors["synthetic.class_dirs"] = model.class_dirs.astype(np.float32)
    meta = {
        "synthetic": {
            "class_map": list(model.class_map),
            "prompt": list(model.prompt),
            "wiring": None if model.wiring is None else model.wiring.to_dict(),
            **model.meta,
        },
        "version": __version__,
    }
    container.write(path, model.config.to_dict(), tensors, meta)


def load_model(path):
    cfg_dict, tensors, meta = container.read(path)
    try:
        config = ModelConfig.from_dict(cfg_dict)
        weights = WeightSet(**{n: tensors[n] for n in WEIGHT_NAMES})
    except KeyError as exc:
        raise InputError(f"{path}: missing tensor {exc}") from None
    except TypeError as exc:
        raise InputError(f"{path}: bad config header ({exc})") from None
    weights.validate(config)
    syn = meta.get("synthetic")
    if syn is None or "synthetic.class_dirs" not in tensors:
        return SyntheticModel(config, weights, np.zeros((0, config.d_model)), (), (), None, {})
    wiring = None if syn.get("wiring") is None else WiringSpec.from_dict(syn["wiring"])
    extra = {k: v for k, v in syn.items() if k not in ("class_map", "prompt", "wiring")}
    return SyntheticModel(
        config, weights, tensors["synthetic.class_dirs"].astype(np.float64),
        tuple(syn["class_map"]), tuple(syn["prompt"]), wiring, extra,
    )


def save_tasks(path, seqs):
    data = {
        "instances": [
            {
                "image": s.image_embeddings.tolist(),
                "text_tokens": list(s.text_tokens),
                "target_token": s.target_token,
                "label": s.label,
            }
            for s in seqs
        ]
    }
    write_text(path, json.dumps(data, separators=(",", ":")) + "\n")


def load_tasks(path):
    data = read_json(path)
    try:
        return [
            MultimodalSequence(np.asarray(d["image"], np.float32), d["text_tokens"], d["target_token"], d.get("label"))
            for d in data["instances"]
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{path}: malformed task file ({exc})") from None


def save_baseline(path, config, baseline):
    container.write(path, config.to_dict(), baseline.tensors(), {"provenance": baseline.provenance})


def load_baseline(path, config):
    cfg_dict, tensors, meta = container.read(path)
    if cfg_dict and cfg_dict != config.to_dict():
        raise ConfigError(f"{path} was computed for a different model config")
    baseline = BaselineKV.from_tensors(tensors, config.n_layers, config.n_heads, meta.get("provenance"))
    baseline.check(config)
    return baseline


# --------------------------------------------------------------------------
# manifests


class Run:
    """Tracks inputs/outputs of one command and writes its manifest."""

    def __init__(self, argv, command, cfg=None, seed=None):
        self.argv = list(argv)
        self.command = command
        self.cfg = cfg
        self.seed = seed if seed is not None else (cfg or {}).get("seed")
        self.inputs = {}
        self.outputs = {}

    def input(self, role, path):
        if path is not None:
            self.inputs[role] = {"path": path, "sha256": sha256_file(path)}
        return path

    def output(self, path):
        self.outputs[os.path.basename(path)] = sha256_file(path)
        return path

    def manifest(self):
        return {
            "tool": "headflow",
            "version": __version__,
            "command": self.command,
            "argv": self.argv,
            "config": self.cfg,
            "seed": self.seed,
            "inputs": self.inputs,
            "outputs": self.outputs,
        }

    def write(self, path):
        write_json(path, self.manifest())


# --------------------------------------------------------------------------
# shared setup


def _sequence(cfg, run):
    seqs = load_tasks(run.input("tasks", _need(cfg, "paths.tasks")))
    i = cfg["task_index"]
    if not 0 <= i < len(seqs):
        raise ConfigError(f"task_index {i} outside 0..{len(seqs) - 1}")
    return seqs[i]


def _model_bundle(cfg, run):
    model = load_model(run.input("model", _need(cfg, "paths.model")))
    seq = _sequence(cfg, run)
    seq.validate(model.config)
    return model, seq


def _oracle(cfg, run, need_model=False):
    """(oracle, model_or_None, sequence_or_None)."""
    if cfg["oracle"]["cmd"] and not need_model:
        inner = SubprocessOracle(
            shlex.split(cfg["oracle"]["cmd"]), timeout=cfg["oracle"]["timeout"], retries=cfg["oracle"]["retries"]
        )
        model = seq = None
        if cfg["paths"]["model"] and cfg["paths"]["tasks"]:
            model, seq = _model_bundle(cfg, run)
        return CachedOracle(inner), model, seq
    model, seq = _model_bundle(cfg, run)
    baseline = load_baseline(run.input("baseline", _need(cfg, "paths.baseline")), model.config)
    inner = ModelOracle(model.config, model.weights, seq, baseline, workers=cfg["workers"])
    return CachedOracle(inner), model, seq


def _close(oracle):
    inner = getattr(oracle, "inner", oracle)
    if hasattr(inner, "close"):
        inner.close()


def _spec(cfg, n):
    s = cfg["sampling"]
    return SamplingSpec(n, s["ablate_fraction"], s["n_samples"], s["train_fraction"], cfg["seed"], s["scheme"])


def _en(cfg):
    e = cfg["en"]
    return ENParams(e["alpha"], e["l1_ratio"], e["max_iter"], e["tol"])


def _heads_result(cfg, run):
    path = run.input("heads", _need(cfg, "paths.heads"))
    try:
        result = AttributionResult.from_dict(read_json(path))
    except (KeyError, TypeError) as exc:
        raise InputError(f"{path}: not an attribution result ({exc})") from None
    if result.target != HEADS:
        raise InputError(f"{path} holds a {result.target} attribution, expected heads")
    return result


def _out_dir(cfg):
    return ensure_dir(cfg["paths"]["out"])


def _clean_trace(model, seq):
    _, trace = forward(model.config, model.weights, seq, want_trace=True)
    return trace


# --------------------------------------------------------------------------
# commands


def _parse_pairs(text):
    out = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        try:
            l, h = item.split(".")
            out.append((int(l), int(h)))
        except ValueError:
            raise ConfigError(f"bad head {item!r}; use LAYER.HEAD") from None
    return tuple(out)


def _parse_ints(text):
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"bad integer list {text!r}") from None


def cmd_gen_model(args, argv):
    arch = ModelConfig(**{k: getattr(args, f"arch_{k}") for k in ModelConfig().to_dict()})
    if args.kind == "random":
        model = random_synthetic_model(arch, args.scale, args.seed)
    else:
        mode, _, count = args.wiring.partition(":")
        if mode not in (EXCLUSIVE, ANY_ONE):
            raise ConfigError(f"unknown wiring mode {mode!r}")
        if args.wired_heads:
            heads = _parse_pairs(args.wired_heads)
        else:
            count = int(count) if count else 3
            if not 1 <= count <= arch.n_components:
                raise ConfigError(f"wired head count {count} outside 1..{arch.n_components}")
            if count == 3 and arch.n_layers >= 4 and arch.n_heads >= 3:
                heads = WiringSpec().wired_heads
            else:
                rng = np.random.default_rng([args.seed, 7])
                flat = sorted(rng.choice(arch.n_components, size=count, replace=False))
                heads = tuple((int(n) // arch.n_heads, int(n) % arch.n_heads) for n in flat)
        wiring = WiringSpec(
            wired_heads=heads,
            redundancy=mode,
            signal_tokens=_parse_ints(args.signal_tokens),
            receive_positions=_parse_ints(args.receive_positions) if args.receive_positions else None,
            n_classes=args.n_classes,
        )
        model = gen_copyhead_model(arch, wiring, args.seed)
    save_model(args.out, model)
    run = Run(argv, ["gen", "model"], seed=args.seed)
    run.output(args.out)
    run.write(args.out + ".manifest.json")
    return 0


def cmd_gen_tasks(args, argv, calibration=False):
    run = Run(argv, ["gen", "calibration" if calibration else "tasks"], seed=args.seed)
    model = load_model(run.input("model", args.model))
    if not model.class_map:
        raise InputError(f"{args.model} carries no task generator metadata")
    if calibration:
        seqs = gen_calibration_pool(model, args.n, args.noise, args.seed)
    else:
        seqs = gen_tasks(model, args.n, args.noise, args.seed)
    save_tasks(args.out, seqs)
    run.output(args.out)
    run.write(args.out + ".manifest.json")
    return 0


def cmd_calibrate(args, argv):
    run = Run(argv, ["calibrate"])
    model = load_model(run.input("model", args.model))
    pool = load_tasks(run.input("calibration", args.calibration))
    if args.index is not None:
        if not 0 <= args.index < len(pool):
            raise ConfigError(f"index {args.index} outside 0..{len(pool) - 1}")
        pool = [pool[args.index]]
    prov = {"source_sha256": run.inputs["calibration"]["sha256"], "index": args.index}
    baseline = compute_baseline_kv(model.config, model.weights, pool, prov)
    save_baseline(args.out, model.config, baseline)
    run.output(args.out)
    run.write(args.out + ".manifest.json")
    return 0


def cmd_attribute_heads(args, argv):
    cfg = resolve_config(args)
    run = Run(argv, ["attribute", "heads"], cfg)
    oracle, _, _ = _oracle(cfg, run)
    try:
        result = attribute(oracle, _spec(cfg, oracle.n_heads), _en(cfg))
    finally:
        _close(oracle)
    out = _out_dir(cfg)
    run.output(write_json(os.path.join(out, "attribution.json"), result.to_dict()))
    run.write(os.path.join(out, "manifest.json"))
    return 0


def _core_and_tokens(cfg, oracle, heads):
    anchors = tuple(heads.anchors)
    live = oracle.anchors()
    if live != anchors:
        raise InputError("heads result was computed against a different oracle (anchors differ)")
    core = select_core_heads(oracle, heads, cfg["thresholds"]["faithfulness"], anchors)
    report = text_token_effects(oracle, core.x_star, cfg["thresholds"]["token"], anchors)
    return anchors, core, report


def _imgattr_dict(cfg, oracle, core, report):
    spec = _spec(cfg, oracle.n_image)
    img = image_token_attribution(oracle, core.x_star, report.important, spec, _en(cfg))
    return img, img.to_dict()


def cmd_attribute_image(args, argv):
    cfg = resolve_config(args)
    run = Run(argv, ["attribute", "image-tokens"], cfg)
    heads = _heads_result(cfg, run)
    oracle, _, _ = _oracle(cfg, run)
    try:
        _, core, report = _core_and_tokens(cfg, oracle, heads)
        _, data = _imgattr_dict(cfg, oracle, core, report)
    finally:
        _close(oracle)
    data["core"] = core.to_dict()
    data["u_star"] = [int(b) for b in report.important]
    out = _out_dir(cfg)
    run.output(write_json(os.path.join(out, "imgattr.json"), data))
    run.write(os.path.join(out, "manifest.json"))
    return 0


def _rankings(cfg, oracle, heads, model, seq, anchors):
    rankings = {"attribution": coefficient_ranking(heads)}
    if model is not None:
        rankings["attention"] = attention_ranking(_clean_trace(model, seq), model.config.n_image)
    rankings["causal"] = causal_ranking(oracle, anchors)
    for s in range(cfg["eval"]["n_random"]):
        rankings[f"random_{s}"] = random_ranking(oracle.n_heads, [cfg["seed"], s])
    return rankings


def cmd_eval_curves(args, argv):
    cfg = resolve_config(args)
    run = Run(argv, ["eval", "curves"], cfg)
    heads = _heads_result(cfg, run)
    oracle, model, seq = _oracle(cfg, run)
    try:
        anchors = tuple(heads.anchors)
        rankings = _rankings(cfg, oracle, heads, model, seq, anchors)
        pairs = [curves(oracle, r, anchors, name) for name, r in rankings.items()]
    finally:
        _close(oracle)
    th = cfg["thresholds"]
    rows = []
    for pair in pairs:
        rows.append((pair.name, FAITHFULNESS_ABOVE, th["faithfulness"],
                     min_components(pair.faithfulness, FAITHFULNESS_ABOVE, th["faithfulness"])))
        rows.append((pair.name, COMPLETENESS_BELOW, th["completeness"],
                     min_components(pair.completeness, COMPLETENESS_BELOW, th["completeness"])))
    out = _out_dir(cfg)
    run.output(write_curves_csv(os.path.join(out, "curves.csv"), pairs))
    run.output(write_minheads_csv(os.path.join(out, "minheads.csv"), rows))
    if model is not None:
        att = image_attention_per_head(_clean_trace(model, seq), model.config.n_image)
        pairs_ta = theta_attention_pairs(heads.theta, att)
        run.output(write_csv(os.path.join(out, "theta_attention.csv"), ["head", "theta", "image_attention"], pairs_ta))
    run.write(os.path.join(out, "manifest.json"))
    return 0


def cmd_eval_sweep(args, argv):
    cfg = resolve_config(args)
    run = Run(argv, ["eval", "sweep"], cfg)
    heads = _heads_result(cfg, run)
    oracle, model, seq = _oracle(cfg, run)
    sw = cfg["sweep"]
    try:
        anchors = tuple(heads.anchors)
        rankings = _rankings(cfg, oracle, heads, model, seq, anchors)
        table = sweep(oracle, rankings, sw["faith_thresholds"], sw["comp_thresholds"], sw["fractions"],
                      _spec(cfg, oracle.n_heads), _en(cfg), anchors)
    finally:
        _close(oracle)
    out = _out_dir(cfg)
    run.output(write_minheads_csv(os.path.join(out, "minheads.csv"), table.rows))
    fractions = {
        f"{frac:g}": {"ranking": table.fraction_rankings[frac], "test_r2": table.fraction_results[frac].fit.test_r2}
        for frac in sorted(table.fraction_rankings)
    }
    run.output(write_json(os.path.join(out, "fractions.json"), fractions))
    run.write(os.path.join(out, "manifest.json"))
    return 0


def cmd_tokens(args, argv):
    cfg = resolve_config(args)
    run = Run(argv, ["tokens"], cfg)
    heads = _heads_result(cfg, run)
    oracle, model, seq = _oracle(cfg, run)
    try:
        anchors, core, report = _core_and_tokens(cfg, oracle, heads)
        img, img_data = _imgattr_dict(cfg, oracle, core, report)
    finally:
        _close(oracle)
    out = _out_dir(cfg)
    tokens = report.to_dict()
    tokens["core"] = core.to_dict()
    tokens["anchors"] = {"raw_zero": anchors[0], "raw_one": anchors[1]}
    run.output(write_json(os.path.join(out, "tokens.json"), tokens))
    if model is not None:
        w = weighted_attention_map(
            _clean_trace(model, seq), heads.theta, core.x_star, report.delta_pi, report.important,
            model.config.n_image,
        )
        img_data["wmap_theta_pearson"] = theta_attention_correlation(w, img.theta)
        img_data["wmap_delta_pi_clipped"] = False
        run.output(write_wmap_csv(os.path.join(out, "wmap.csv"), w))
    run.output(write_json(os.path.join(out, "imgattr.json"), img_data))
    run.write(os.path.join(out, "manifest.json"))
    return 0


def cmd_lens(args, argv):
    cfg = resolve_config(args)
    run = Run(argv, ["lens"], cfg)
    model, seq = _model_bundle(cfg, run)
    trace = _clean_trace(model, seq)
    c = model.config
    pos = c.n_image + seq.n_text - 1 if args.position is None else args.position
    if not 0 <= pos < c.n_image + seq.n_text:
        raise ConfigError(f"position {pos} outside the sequence")
    heads = []
    for layer in range(c.n_layers):
        for h in range(c.n_heads):
            top = logit_lens_head(trace.head_outputs[layer, h, pos], model.weights, args.k)
            heads.append({"layer": layer, "head": h, "top": [[t, s] for t, s in top]})
    out = _out_dir(cfg)
    run.output(write_json(os.path.join(out, "lens.json"), {"position": pos, "heads": heads}))
    run.write(os.path.join(out, "manifest.json"))
    return 0


def cmd_oracle_serve(args, argv):
    cfg = resolve_config(args)
    run = Run(argv, ["oracle", "serve"], cfg)
    cfg["oracle"]["cmd"] = None
    oracle, _, _ = _oracle(cfg, run)
    serve(oracle.inner, sys.stdin.buffer, sys.stdout.buffer)
    return 0


def cmd_oracle_verify(args, argv):
    cfg = resolve_config(args)
    run = Run(argv, ["oracle", "verify"], cfg)
    cmd = args.cmd or cfg["oracle"]["cmd"]
    if not cmd:
        raise ConfigError("--cmd is required")
    cfg["oracle"]["cmd"] = None
    local, _, _ = _oracle(cfg, run)
    remote = SubprocessOracle(shlex.split(cmd), timeout=cfg["oracle"]["timeout"], retries=cfg["oracle"]["retries"])
    try:
        n_match, bad = verify_roundtrip(local.inner, remote, args.n, cfg["seed"])
    finally:
        remote.close()
    print(f"{n_match}/{args.n} queries match")
    out = _out_dir(cfg)
    data = {"n": args.n, "n_match": n_match, "mismatches": [[i, a, b] for i, a, b in bad]}
    run.output(write_json(os.path.join(out, "verify.json"), data))
    run.write(os.path.join(out, "manifest.json"))
    if bad:
        raise NumericalError(f"{len(bad)} of {args.n} queries differ")
    return 0


def cmd_report(args, argv):
    cfg = resolve_config(args)
    run = Run(argv, ["report"], cfg)
    results = []
    for i, path in enumerate(args.results):
        run.input(f"result_{i}", path)
        try:
            results.append(AttributionResult.from_dict(read_json(path)))
        except (KeyError, TypeError) as exc:
            raise InputError(f"{path}: not an attribution result ({exc})") from None
    if not results:
        raise ConfigError("report needs at least one attribution result")
    out = _out_dir(cfg)
    summary = {
        "results": [
            {
                "path": path,
                "target": r.target,
                "test_r2": r.fit.test_r2,
                "test_pearson": r.fit.test_pearson,
                "top": coefficient_ranking(r)[:5],
            }
            for path, r in zip(args.results, results)
        ]
    }
    if len(results) >= 2:
        vecs = head_vectors([r.theta for r in results])
        n_clusters = min(cfg["eval"]["n_clusters"], vecs.shape[0])
        cl = head_similarity_and_cluster(vecs, n_clusters)
        run.output(write_headsim_csv(os.path.join(out, "headsim.csv"), cl.cosine))
        summary["clusters"] = {"labels": cl.labels, "order": cl.order, "zero_norm": cl.zero_norm,
                               "linkage": cl.method, "distance": "1 - cosine"}
    run.output(write_json(os.path.join(out, "report.json"), summary))
    run.write(os.path.join(out, "manifest.json"))
    return 0


def cmd_synthetic_verify(args, argv):
    run = Run(argv, ["synthetic", "verify"], seed=args.seed)
    model = load_model(run.input("model", args.model))
    report = verify_construction(model, args.noise, args.seed)
    for c in report.checks:
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.name}  value={c.value:.6g}  ({c.bound})")
    if args.out_dir:
        ensure_dir(args.out_dir)
        run.output(write_json(os.path.join(args.out_dir, "verify.json"), report.to_dict()))
        run.write(os.path.join(args.out_dir, "manifest.json"))
    if not report.passed:
        raise NumericalError("construction self-test failed")
    return 0


def cmd_rerun(args, argv):
    data = read_json(args.manifest)
    if data.get("tool") != "headflow" or "argv" not in data:
        raise InputError(f"{args.manifest} is not a headflow manifest")
    return main(data["argv"])


# --------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def build_parser():
    p = _Parser(prog="headflow", description="Head- and token-level attribution for toy multimodal models.")
    p.add_argument("--version", action="version", version=f"headflow {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    gen = sub.add_parser("gen", help="generate models, tasks, calibration pools")
    gsub = gen.add_subparsers(dest="what", parser_class=_Parser)
    gsub.required = True
    gm = gsub.add_parser("model")
    gm.add_argument("--out", required=True)
    gm.add_argument("--kind", choices=("copyhead", "random"), default="copyhead")
    gm.add_argument("--wiring", default=f"{EXCLUSIVE}:3", help="MODE[:COUNT]")
    gm.add_argument("--wired-heads", help="explicit heads, e.g. 1.2,2.1,3.0")
    gm.add_argument("--signal-tokens", default="5")
    gm.add_argument("--receive-positions", help="text indices; default final token")
    gm.add_argument("--n-classes", type=int, default=8)
    gm.add_argument("--scale", type=float, default=1.0)
    gm.add_argument("--seed", type=int, default=0)
    for k, v in ModelConfig().to_dict().items():
        gm.add_argument(f"--arch.{k}", dest=f"arch_{k}", type=int, default=v)
    gm.set_defaults(func=cmd_gen_model)
    for what in ("tasks", "calibration"):
        g = gsub.add_parser(what)
        g.add_argument("--model", required=True)
        g.add_argument("--out", required=True)
        g.add_argument("--n", type=int, default=100 if what == "calibration" else 20)
        g.add_argument("--noise", type=float, default=0.1)
        g.add_argument("--seed", type=int, default=0)
        if what == "tasks":
            g.set_defaults(func=cmd_gen_tasks)
        else:
            g.set_defaults(func=lambda a, v: cmd_gen_tasks(a, v, calibration=True))

    cal = sub.add_parser("calibrate", help="average image K/V over a calibration pool")
    cal.add_argument("--model", required=True)
    cal.add_argument("--calibration", required=True)
    cal.add_argument("--index", type=int, help="use only this instance (self-calibration)")
    cal.add_argument("--out", required=True)
    cal.set_defaults(func=cmd_calibrate)

    att = sub.add_parser("attribute", help="head or image-token attribution")
    asub = att.add_subparsers(dest="target", parser_class=_Parser)
    asub.required = True
    ah = asub.add_parser("heads")
    _add_run_flags(ah)
    ah.set_defaults(func=cmd_attribute_heads)
    ai = asub.add_parser("image-tokens")
    _add_run_flags(ai)
    ai.set_defaults(func=cmd_attribute_image)

    ev = sub.add_parser("eval", help="faithfulness/completeness curves and sweeps")
    esub = ev.add_subparsers(dest="what", parser_class=_Parser)
    esub.required = True
    ec = esub.add_parser("curves")
    _add_run_flags(ec)
    ec.set_defaults(func=cmd_eval_curves)
    es = esub.add_parser("sweep")
    _add_run_flags(es)
    es.set_defaults(func=cmd_eval_sweep)

    tk = sub.add_parser("tokens", help="core heads, text-token effects, image-token attribution")
    _add_run_flags(tk)
    tk.set_defaults(func=cmd_tokens)

    ln = sub.add_parser("lens", help="logit lens on every head output")
    _add_run_flags(ln)
    ln.add_argument("--k", type=int, default=10)
    ln.add_argument("--position", type=int, help="sequence position (default final)")
    ln.set_defaults(func=cmd_lens)

    orc = sub.add_parser("oracle", help="NDJSON oracle serving and verification")
    osub = orc.add_subparsers(dest="what", parser_class=_Parser)
    osub.required = True
    osv = osub.add_parser("serve")
    _add_run_flags(osv)
    osv.set_defaults(func=cmd_oracle_serve)
    ovf = osub.add_parser("verify")
    _add_run_flags(ovf)
    ovf.add_argument("--cmd", help="command line of the external oracle")
    ovf.add_argument("--n", type=int, default=100)
    ovf.set_defaults(func=cmd_oracle_verify)

    rp = sub.add_parser("report", help="summarize attribution results, head similarity")
    _add_run_flags(rp)
    rp.add_argument("results", nargs="*")
    rp.set_defaults(func=cmd_report)

    syn = sub.add_parser("synthetic", help="construction self-test")
    ssub = syn.add_subparsers(dest="what", parser_class=_Parser)
    ssub.required = True
    sv = ssub.add_parser("verify")
    sv.add_argument("--model", required=True)
    sv.add_argument("--seed", type=int, default=0)
    sv.add_argument("--noise", type=float, default=0.1)
    sv.add_argument("--out-dir")
    sv.set_defaults(func=cmd_synthetic_verify)

    rr = sub.add_parser("rerun", help="replay the command recorded in a manifest")
    rr.add_argument("manifest")
    rr.set_defaults(func=cmd_rerun)
    return p


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        return int(args.func(args, argv) or 0)
    except HeadflowError as exc:
        print(f"headflow: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
