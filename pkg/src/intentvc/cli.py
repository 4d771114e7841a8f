"""``intentvc`` command line: dataset checks, prompt building, the adapter
sanity demo, scoring, voting and length routing.

Every command resolves its settings as built-in defaults, then an optional
``--config`` JSON file, then explicit flags, and writes the result as
``run_config.json`` next to its outputs; feeding that file back with
``--config`` reproduces the outputs byte for byte.

Exit codes: 0 success, 1 validation or contract failure, 2 I/O or parse
failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
import zlib
from pathlib import Path

import numpy as np

from . import __version__
from .adapter import (
    AdapterStack,
    AdapterStackConfig,
    BoxAdapterConfig,
    NormalizedBox,
    count_trainable_params,
    vit_stack_forward,
)
from .dataset import (
    CATEGORIES,
    LENGTH_THRESHOLD,
    load_annotations,
    make_split,
    route_by_length,
    sample_frames_infer,
    sample_frames_train,
    validate_corpus,
)
from .ensemble import SimilarityConfig, vote_corpus
from .errors import AnnotationParseError, ConfigurationError, InputError, IntentVCError, ValidationError
from .files import read_captions, read_references, write_json, write_jsonl
from .fixtures import frame_path, make_fixture_corpus
from .metrics import METRICS, MetricConfig, score_all
from .prompts import MODES, build_bundle, read_ppm, write_ppm
from .tensor import Tensor, grad_check

EXIT_OK, EXIT_FAIL, EXIT_IO = 0, 1, 2

DEFAULTS = {
    "validate-dataset": {"dataset_root": None, "out": None},
    "build-prompts": {"dataset_root": None, "mode": "text", "seed": 0, "sampler": "infer",
                      "split": "all", "frames_root": None, "out": None},
    "adapter-demo": {"d": 8, "heads": 2, "height": 4, "width": 4, "frames": 2, "roi": 2,
                     "layers": 6, "adapter_layers": 5, "seed": 0, "grad_step": 1e-3, "fd_order": 4,
                     "tol": 1e-4, "out": None},
    "score": {"candidates": None, "references": None, "metrics": list(METRICS), "out": None},
    "vote": {"inputs": None, "model_ids": None, "char_n": 3, "char_weight": 0.5,
             "token_weight": 0.5, "out": None},
    "route": {"dataset_root": None, "threshold": LENGTH_THRESHOLD, "out": None},
    "make-fixture": {"out": None, "categories": 70, "videos_per_category": 20, "seed": 0,
                     "min_frames": 20, "max_frames": 120, "width": 64, "height": 48,
                     "write_frames": False},
}
REQUIRED = {
    "validate-dataset": ["dataset_root"],
    "build-prompts": ["dataset_root", "out"],
    "score": ["candidates", "references"],
    "vote": ["inputs", "out"],
    "route": ["dataset_root"],
    "make-fixture": ["out"],
}


def _sub_rng(seed, *names):
    """Independent generator for a named sub-stream of ``seed``."""
    return np.random.default_rng([seed] + [zlib.crc32(n.encode()) for n in names])


def _emit_config(cfg):
    if cfg.get("out"):
        write_json(Path(cfg["out"]) / "run_config.json", cfg)


# -- commands ---------------------------------------------------------------

def cmd_validate_dataset(cfg):
    report = validate_corpus(cfg["dataset_root"])
    counts = report.counts()
    print(f"videos: {len(report.annotations)}")
    for rule, n in sorted(counts.items()):
        print(f"{rule}: {n}")
    for v in report.violations[:50]:
        print(f"  {v}")
    if len(report.violations) > 50:
        print(f"  ... {len(report.violations) - 50} more")
    if cfg.get("out"):
        write_json(Path(cfg["out"]) / "validation.json",
                   {"videos": len(report.annotations), "counts": counts,
                    "violations": [str(v) for v in report.violations]})
        _emit_config(cfg)
    print("clean" if report.ok else "violations found")
    return EXIT_OK if report.ok else EXIT_FAIL


def cmd_build_prompts(cfg):
    if cfg["mode"] not in MODES:
        raise ConfigurationError(f"--mode must be one of {MODES}")
    if cfg["sampler"] not in ("infer", "train"):
        raise ConfigurationError("--sampler must be 'infer' or 'train'")
    root, out = Path(cfg["dataset_root"]), Path(cfg["out"])
    frames_root = Path(cfg["frames_root"]) if cfg.get("frames_root") else root
    anns = load_annotations(root)
    if cfg["split"] != "all":
        split = make_split(anns, seed=cfg["seed"]).to_dict()
        if cfg["split"] not in split:
            raise ConfigurationError(f"--split must be 'all' or one of {list(split)}")
        keep = set(split[cfg["split"]])
        anns = [a for a in anns if a.video_id in keep]
    rows = []
    for ann in anns:
        if cfg["sampler"] == "train":
            idx = sample_frames_train(ann.n_frames, _sub_rng(cfg["seed"], "sampler", ann.video_id))
        else:
            idx = sample_frames_infer(ann.n_frames)
        frames = None
        if cfg["mode"] != "text":
            frames = []
            for pos in idx:
                p = frame_path(frames_root, ann.video_id, ann.frames[pos].frame_index)
                if not p.exists():
                    raise InputError(f"mode {cfg['mode']!r} needs frame images; missing {p}")
                frames.append(read_ppm(p))
        bundle = build_bundle(ann, idx, cfg["mode"], frames)
        rec = bundle.record()
        rec["frame_indices"] = [ann.frames[p].frame_index for p in idx]
        rows.append(rec)
        if bundle.rendered_frames is not None:
            for pos, img in zip(idx, bundle.rendered_frames):
                write_ppm(out / "frames" / ann.video_id / f"frame_{ann.frames[pos].frame_index}.ppm", img)
    write_jsonl(out / "prompts.jsonl", rows)
    _emit_config(cfg)
    print(f"wrote {len(rows)} prompts ({cfg['mode']}) to {out}")
    return EXIT_OK


def _random_boxes(rng, n):
    boxes = []
    for i in range(n):
        if i == n - 1 and n > 1:
            boxes.append(NormalizedBox.sentinel())
            continue
        x1, x2 = np.sort(rng.uniform(0, 1, 2))
        y1, y2 = np.sort(rng.uniform(0, 1, 2))
        boxes.append(NormalizedBox(float(x1), float(y1), float(x2), float(y2)))
    return boxes


def cmd_adapter_demo(cfg):
    acfg = BoxAdapterConfig(d=cfg["d"], heads=cfg["heads"], roi_h=cfg["roi"], roi_w=cfg["roi"])
    L, k = cfg["layers"], cfg["adapter_layers"]
    scfg = AdapterStackConfig(L, k, acfg, seed=cfg["seed"])
    rng = _sub_rng(cfg["seed"], "adapter-demo")
    shape = (cfg["frames"], cfg["d"], cfg["height"], cfg["width"])
    feat = Tensor(rng.normal(size=shape))
    boxes = _random_boxes(rng, cfg["frames"])
    checks = {}

    t0 = time.perf_counter()
    stack_ = AdapterStack(scfg)
    with_adapters = stack_(feat, boxes).data
    plain = vit_stack_forward(feat, boxes, stack_, use_adapters=False).data
    diff = float(np.max(np.abs(with_adapters - plain)))
    checks["identity_at_init"] = {"max_abs_diff": diff, "passed": diff == 0.0}
    t_identity = time.perf_counter() - t0

    t0 = time.perf_counter()
    for ad in stack_.adapters.values():
        ad.perturb(rng)
    probe = rng.uniform(-1, 1, shape)
    rep = grad_check(lambda: (stack_(feat, boxes) * probe).sum(), stack_.parameters(),
                     step=cfg["grad_step"], order=cfg["fd_order"])
    checks["grad_check"] = {"max_rel_err": float(rep.max_rel_err), "entries": int(rep.n_entries),
                            "step": cfg["grad_step"], "order": cfg["fd_order"], "tol": cfg["tol"],
                            "passed": bool(rep.passed(cfg["tol"]))}
    t_grad = time.perf_counter() - t0

    count = count_trainable_params(stack_)
    per_adapter = stack_.adapters[L].num_parameters() if k else 0
    checks["param_count"] = {"trainable": count, "per_adapter": per_adapter,
                             "passed": count == k * per_adapter}

    print(f"stack: L={L}, adapters after layers {scfg.adapter_layer_indices}, d={cfg['d']}, "
          f"feature {cfg['height']}x{cfg['width']}, RoI {cfg['roi']}x{cfg['roi']}")
    print(f"identity at init: max |diff| = {diff:g}  {'ok' if checks['identity_at_init']['passed'] else 'FAILED'}")
    print(f"grad check: max rel err = {rep.max_rel_err:.3e} over {rep.n_entries} entries "
          f"(order-{cfg['fd_order']} stencil, step {cfg['grad_step']:g}, tol {cfg['tol']:g})  {'ok' if checks['grad_check']['passed'] else 'FAILED'}")
    print(f"trainable parameters: {count} ({k} x {per_adapter})  "
          f"{'ok' if checks['param_count']['passed'] else 'FAILED'}")
    print(f"timing: identity {t_identity:.2f}s, grad check {t_grad:.2f}s")
    if cfg.get("out"):
        write_json(Path(cfg["out"]) / "adapter_demo.json", {"checks": checks, "stack": scfg.to_dict()})
        _emit_config(cfg)
    failed = [name for name, c in checks.items() if not c["passed"]]
    if failed:
        print(f"failed checks: {', '.join(failed)}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_score(cfg):
    cands = read_captions(cfg["candidates"])
    refs = read_references(cfg["references"])
    metrics = cfg["metrics"]
    if isinstance(metrics, str):
        metrics = [m for m in metrics.split(",") if m]
    report = score_all(cands, refs, MetricConfig(metrics=tuple(metrics)))
    names = {"cider": "CIDEr", "meteor": "METEOR", "bleu4": "BLEU@4", "rouge_l": "ROUGE-L"}
    for m in METRICS:
        if m in report.corpus:
            print(f"{names[m]}: {100 * report.corpus[m]:.2f}")
    if cfg.get("out"):
        write_json(Path(cfg["out"]) / "scores.json", report.to_dict())
        _emit_config(cfg)
    if report.missing:
        print(f"error: no candidate caption for {', '.join(report.missing)}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_vote(cfg):
    inputs = cfg["inputs"]
    sets = [read_captions(p) for p in inputs]
    ids = cfg.get("model_ids") or [Path(p).stem for p in inputs]
    if len(set(ids)) != len(ids):
        ids = [f"{m}#{i}" for i, m in enumerate(ids)]
    sim = SimilarityConfig(n=cfg["char_n"], weights=(("char_ngram_cosine", cfg["char_weight"]),
                                                     ("token_f1", cfg["token_weight"])))
    fused, audits = vote_corpus(sets, sim, model_ids=ids, audit=True)
    out = Path(cfg["out"])
    write_jsonl(out / "fused.jsonl", [{"video_id": v, "caption": c} for v, c in fused.items()])
    write_json(out / "audit.json", [a.to_dict() for a in audits])
    _emit_config(cfg)
    wins = {}
    for a in audits:
        wins[a.winner] = wins.get(a.winner, 0) + 1
    print(f"voted {len(fused)} videos across {len(sets)} models; wins: "
          + ", ".join(f"{m}={wins.get(m, 0)}" for m in ids))
    return EXIT_OK


def cmd_route(cfg):
    if cfg["threshold"] < 1:
        raise ConfigurationError("--threshold must be >= 1")
    anns = load_annotations(cfg["dataset_root"])
    manifest = {"short": [], "long": []}
    for a in anns:
        manifest[route_by_length(a.n_frames, cfg["threshold"])].append(a.video_id)
    if cfg.get("out"):
        write_json(Path(cfg["out"]) / "routes.json", manifest)
        _emit_config(cfg)
    print(json.dumps(manifest))
    return EXIT_OK


def cmd_make_fixture(cfg):
    n = cfg["categories"]
    if not 1 <= n <= len(CATEGORIES):
        raise ConfigurationError(f"--categories must be in 1..{len(CATEGORIES)}")
    ids = make_fixture_corpus(cfg["out"], categories=CATEGORIES[:n],
                              videos_per_category=cfg["videos_per_category"], seed=cfg["seed"],
                              frame_size=(cfg["width"], cfg["height"]),
                              frame_range=(cfg["min_frames"], cfg["max_frames"]),
                              write_frames=cfg["write_frames"])
    print(f"wrote {len(ids)} annotation files to {cfg['out']}")
    return EXIT_OK


COMMANDS = {
    "validate-dataset": cmd_validate_dataset,
    "build-prompts": cmd_build_prompts,
    "adapter-demo": cmd_adapter_demo,
    "score": cmd_score,
    "vote": cmd_vote,
    "route": cmd_route,
    "make-fixture": cmd_make_fixture,
}


# -- argument parsing -------------------------------------------------------

def _parser():
    S = argparse.SUPPRESS
    p = argparse.ArgumentParser(prog="intentvc", allow_abbrev=False,
                                description="Box-conditioned video captioning toolkit.")
    p.add_argument("--version", action="version", version=f"intentvc {__version__}")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", required=True)

    def cmd(name, help_):
        sp = sub.add_parser(name, help=help_, allow_abbrev=False, argument_default=S,
                            description=help_)
        sp.add_argument("--config", help="JSON file of settings; explicit flags take precedence")
        return sp

    sp = cmd("validate-dataset", "check annotation files and print per-rule violation counts")
    sp.add_argument("--dataset-root", help="directory of <video_id>.json annotations")
    sp.add_argument("--out", help="also write validation.json and run_config.json here")

    sp = cmd("build-prompts", "write instruction JSONL and, for visual modes, boxed PPM frames")
    sp.add_argument("--dataset-root", help="directory of annotations")
    sp.add_argument("--mode", help=f"one of {', '.join(MODES)} (default text)")
    sp.add_argument("--seed", type=int, help="seed for the split and the training sampler (default 0)")
    sp.add_argument("--sampler", help="'infer' (uniform stride, default) or 'train' (random clip)")
    sp.add_argument("--split", help="'all' (default), 'train', 'public_test' or 'private_test'")
    sp.add_argument("--frames-root", help="root holding frames/<video_id>/frame_<i>.ppm "
                                          "(default: the dataset root)")
    sp.add_argument("--out", help="output directory")

    sp = cmd("adapter-demo", "identity, gradient and parameter-count checks on a toy adapter stack")
    sp.add_argument("--d", type=int, help="feature width (default 8)")
    sp.add_argument("--heads", type=int, help="attention heads (default 2)")
    sp.add_argument("--height", type=int, help="feature map height (default 4)")
    sp.add_argument("--width", type=int, help="feature map width (default 4)")
    sp.add_argument("--frames", type=int, help="frames per clip (default 2; the last is out of scene)")
    sp.add_argument("--roi", type=int, help="RoI output side (default 2)")
    sp.add_argument("--layers", type=int, help="ViT depth L (default 6)")
    sp.add_argument("--adapter-layers", type=int, help="adapters after the last k layers (default 5)")
    sp.add_argument("--seed", type=int, help="weight and input seed (default 0)")
    sp.add_argument("--grad-step", type=float, help="finite-difference step (default 1e-3)")
    sp.add_argument("--fd-order", type=int, help="central-difference order, 2 or 4 (default 4)")
    sp.add_argument("--tol", type=float, help="max relative gradient error (default 1e-4)")
    sp.add_argument("--out", help="also write adapter_demo.json and run_config.json here")

    sp = cmd("score", "BLEU@4, ROUGE-L, CIDEr and METEOR-lite for a caption file")
    sp.add_argument("--candidates", help='JSONL of {"video_id", "caption"}, one line per video')
    sp.add_argument("--references", help="JSONL of reference captions, one line per reference")
    sp.add_argument("--metrics", help=f"comma-separated subset of {','.join(METRICS)}")
    sp.add_argument("--out", help="also write scores.json and run_config.json here")

    sp = cmd("vote", "pick each video's consensus caption across several models")
    sp.add_argument("--inputs", nargs="+", help="one caption JSONL per model, in priority order")
    sp.add_argument("--model-ids", nargs="+", help="names for the inputs (default: file stems)")
    sp.add_argument("--char-n", type=int, help="character n-gram size (default 3)")
    sp.add_argument("--char-weight", type=float, help="weight of n-gram cosine (default 0.5)")
    sp.add_argument("--token-weight", type=float, help="weight of token F1 (default 0.5)")
    sp.add_argument("--out", help="directory for fused.jsonl, audit.json and run_config.json")

    sp = cmd("route", "split videos into short and long by frame count")
    sp.add_argument("--dataset-root", help="directory of annotations")
    sp.add_argument("--threshold", type=int, help=f"videos with fewer frames are short (default {LENGTH_THRESHOLD})")
    sp.add_argument("--out", help="also write routes.json and run_config.json here")

    sp = cmd("make-fixture", "write a synthetic corpus with the real dataset's layout")
    sp.add_argument("--out", help="corpus directory")
    sp.add_argument("--categories", type=int, help="how many categories (default 70)")
    sp.add_argument("--videos-per-category", type=int, help="default 20")
    sp.add_argument("--seed", type=int, help="default 0")
    sp.add_argument("--min-frames", type=int, help="default 20")
    sp.add_argument("--max-frames", type=int, help="default 120")
    sp.add_argument("--width", type=int, help="frame width (default 64)")
    sp.add_argument("--height", type=int, help="frame height (default 48)")
    sp.add_argument("--write-frames", action="store_true", help="also write PPM frames")
    return p


def resolve_config(args):
    """Defaults, then the ``--config`` file, then explicit flags."""
    flags = vars(args).copy()
    command = flags.pop("command")
    cfg = dict(DEFAULTS[command])
    path = flags.pop("config", None)
    if path:
        try:
            loaded = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise AnnotationParseError(path, f"cannot read config: {exc.strerror or exc}") from exc
        except json.JSONDecodeError as exc:
            raise AnnotationParseError(path, exc.msg, exc.lineno) from exc
        loaded = {k: v for k, v in loaded.items() if k != "command"}
        unknown = sorted(set(loaded) - set(cfg))
        if unknown:
            raise ConfigurationError(f"unknown settings for {command}: {', '.join(unknown)}")
        cfg.update(loaded)
    cfg.update(flags)
    missing = [k for k in REQUIRED.get(command, []) if cfg.get(k) in (None, [], "")]
    if missing:
        raise ConfigurationError("missing required setting(s): "
                                 + ", ".join("--" + k.replace("_", "-") for k in missing))
    return {"command": command, **cfg}


def main(argv=None):
    parser = _parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        return COMMANDS[cfg["command"]](cfg)
    except (AnnotationParseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (IntentVCError, ValueError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
