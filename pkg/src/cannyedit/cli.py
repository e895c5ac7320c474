"""``cannyedit`` command line: canny, train, invert, edit, ablate, gradcheck.

Failures print one JSON object ``{"error": ..., "exit_code": ..., "message": ...}``
on stderr. Exit codes: 2 bad flags, 3 I/O, 4 invalid request, 5 non-finite.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import CannyEditError, InvalidRequest, IOFailure

log = logging.getLogger("cannyedit")

ERROR_NAMES = {2: "bad-flags", 3: "io-error", 4: "invalid-request", 5: "non-finite"}
SCORE_FIELDS = ("background_mse", "psnr", "edge_iou_outside_mask", "region_target_score", "mask_iou")


class BadFlags(CannyEditError):
    exit_code = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise BadFlags(message)


# ---------------------------------------------------------------- config files

def _coerce(raw: str, kind, key: str):
    kind = kind if isinstance(kind, type) else {"bool": bool, "int": int, "float": float, "str": str}.get(
        str(kind).split("|")[0].strip(), str)
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError:
        raise InvalidRequest(f"invalid-request: config key {key!r} cannot take value {raw!r}") from None


def parse_config(text: str, fields: dict[str, type]) -> dict:
    """``key = value`` lines; ``#`` starts a comment; unknown keys are errors."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidRequest(f"invalid-request: config line {lineno} is not key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in fields:
            raise InvalidRequest(f"invalid-request: unknown config key {key!r} (line {lineno})")
        out[key] = _coerce(value, fields[key], key)
    return out


def _read_text(path) -> str:
    try:
        return Path(path).read_text()
    except OSError as e:
        raise IOFailure(f"io-error: cannot read {path}: {e.strerror}") from None


def _field_types(cls) -> dict:
    return {f.name: f.type for f in dataclasses.fields(cls)}


EDIT_PATH_KEYS = {"ckpt": str, "out": str, "report": str, "scores": str}
TRAIN_EXTRA_KEYS = {"samples": int, "data_seed": int, "cache_dir": str}


def load_run_config(path):
    """An ``EditConfig`` plus optional path keys from a run-config file (or defaults)."""
    from .edit import EditConfig
    if path is None:
        return EditConfig(), {}
    values = parse_config(_read_text(path), {**_field_types(EditConfig), **EDIT_PATH_KEYS})
    paths = {k: values.pop(k) for k in list(values) if k in EDIT_PATH_KEYS}
    return EditConfig(**values), paths


def load_hints(path) -> list[tuple[str, tuple[float, float]]]:
    """``[{"subject": str, "point": [x, y]}, ...]`` with coordinates in [0, 1]."""
    try:
        doc = json.loads(_read_text(path))
    except json.JSONDecodeError as e:
        raise InvalidRequest(f"invalid-request: hints file is not JSON: {e.msg}") from None
    if not isinstance(doc, list) or not doc:
        raise InvalidRequest("invalid-request: hints must be a non-empty list")
    out = []
    for item in doc:
        try:
            subject, (x, y) = str(item["subject"]), item["point"]
            x, y = float(x), float(y)
        except (KeyError, TypeError, ValueError):
            raise InvalidRequest(f"invalid-request: malformed hint {item!r}") from None
        if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
            raise InvalidRequest(f"invalid-request: hint point {[x, y]} outside [0, 1]")
        out.append((subject, (x, y)))
    return out


def _guard_outputs(inputs, outputs) -> None:
    ins = {Path(p).resolve() for p in inputs if p}
    for p in outputs:
        if p and Path(p).resolve() in ins:
            raise BadFlags(f"output {p} would overwrite an input")


def _load_model(path):
    from .mmdit import load_checkpoint
    if not path:
        raise BadFlags("--ckpt is required")
    model, _ = load_checkpoint(path)
    return model


def _write_scores_csv(path, rows: list[dict], fields) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in fields})


# ---------------------------------------------------------------- commands

def cmd_canny(args) -> int:
    from .canny import canny_edges
    from .imageio import load_png, save_png
    _guard_outputs([args.input], [args.out])
    edges = canny_edges(load_png(args.input), args.sigma, args.low, args.high)
    save_png(edges.to_image(), args.out)
    return 0


def cmd_train(args) -> int:
    from .mmdit import Model, save_checkpoint
    from .train import TrainConfig, load_or_gen_dataset, train
    values = {}
    if args.config:
        values = parse_config(_read_text(args.config), {**_field_types(TrainConfig), **TRAIN_EXTRA_KEYS})
    for key in ("steps", "batch_size", "seed"):
        if getattr(args, key) is not None:
            values[key] = getattr(args, key)
    samples = values.pop("samples", 1000)
    data_seed = values.pop("data_seed", 0)
    cache_dir = values.pop("cache_dir", None)
    config = TrainConfig(**values)
    if config.steps < 1:
        raise InvalidRequest("invalid-request: steps must be >= 1")
    dataset = load_or_gen_dataset(samples, data_seed, cache_dir)
    result = train(Model.create(), dataset, config, checkpoint_path=args.out,
                   on_log=lambda s, l: print(f"step {s} loss {l:.5f}", file=sys.stderr))
    save_checkpoint(result.model, args.out, {"train": dataclasses.asdict(config), "samples": samples,
                                             "data_seed": data_seed, "steps_done": config.steps})
    if args.losses:
        np.savetxt(args.losses, np.array(result.losses))
    print(json.dumps({"steps": config.steps, "seconds": round(result.seconds, 3),
                      "first_loss": result.losses[0], "last_loss": result.losses[-1]}, sort_keys=True))
    return 0


def cmd_invert(args) -> int:
    from .edit import Editor
    from .imageio import Image, load_png, save_png
    config, _ = load_run_config(args.config)
    _guard_outputs([args.input, args.ckpt, args.config], [args.out, args.cache, args.recon])
    editor = Editor(_load_model(args.ckpt))
    image = load_png(args.input).data
    x_T, cache, _ = editor.invert(image, args.prompt, config)
    np.savez(args.out, x_T=x_T, n_steps=config.n_steps, method=config.method)
    if args.cache:
        cache.save(args.cache)
    if args.recon:
        save_png(Image(editor.reconstruct(image, args.prompt, config)), args.recon)
    return 0


def _masks_from_args(args):
    from .imageio import load_mask_png
    return tuple(load_mask_png(p).astype(bool) for p in args.mask)


def cmd_edit(args) -> int:
    from .edit import EditRequest, edit
    from .imageio import load_png, save_png
    config, paths = load_run_config(args.config)
    ckpt = args.ckpt or paths.get("ckpt")
    out = args.out or paths.get("out")
    if not out:
        raise BadFlags("--out is required")
    report_path = args.report or paths.get("report") or str(Path(out).with_suffix(".json"))
    scores_path = args.scores or paths.get("scores") or str(Path(out).with_suffix(".csv"))
    inputs = [args.input, ckpt, args.config, args.hints] + list(args.mask or [])
    _guard_outputs(inputs, [out, report_path, scores_path])
    if len({out, report_path, scores_path}) < 3:
        raise BadFlags("--out, --report and --scores must differ")

    source = load_png(args.input).data
    local = list(args.local_prompt or [])
    masks = points = None
    if args.hints:
        hints = load_hints(args.hints)
        points = tuple(p for _, p in hints)
        if not local:
            local = [s for s, _ in hints]
    elif args.mask:
        masks = _masks_from_args(args)
    else:
        raise BadFlags("one of --mask or --hints is required")
    if args.task == "remove" and not local:
        local = ["empty background"] * len(masks or ())
    request = EditRequest(args.task, source, tuple(local), args.source_prompt or "", args.target_prompt or "",
                          masks=masks, points=points, negative_prompt=args.negative_prompt,
                          config=config, seed=args.seed)
    model = _load_model(ckpt)
    image, report = edit(model, request)
    save_png(image, out)
    doc = report.to_dict()
    doc["run"] = {"ckpt": str(ckpt), "config_file": args.config, "input": args.input, "seed": args.seed}
    Path(report_path).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    _write_scores_csv(scores_path, [{"variant": report.variant, "seed": args.seed, **doc["scores"]}],
                      ("variant", "seed") + SCORE_FIELDS)
    return 0


def ablation_rows(model, variants, seeds, base_config=None, source=None, masks=None, prompts=None) -> list[dict]:
    """Proxy scores for each variant x seed. Without ``source``, each seed draws a synthetic add task."""
    from .edit import EditConfig, EditRequest, Editor, edit
    from .train import add_task
    editor = Editor(model)
    base = dataclasses.asdict(base_config or EditConfig())
    for flag in ("cc_from_current_pass", "no_cc", "full_cc", "local_prompt_only", "target_prompt_only"):
        base.pop(flag)
    rows = []
    for seed in seeds:
        if source is None:
            task = add_task(seed, model.config.patch_size)
            src, task_masks = task.sample.image, (task.region,)
            local, source_prompt, target = (task.local_prompt,), task.sample.caption, task.target_prompt
        else:
            src, task_masks = source, masks
            local, source_prompt, target = prompts
        for variant in variants:
            config = EditConfig.for_variant(variant, **base)
            req = EditRequest("add", src, local, source_prompt, target, masks=task_masks, config=config, seed=seed)
            _, report = edit(editor, req)
            rows.append({"variant": variant, "seed": seed, **report.scores})
    return rows


def cmd_ablate(args) -> int:
    from .imageio import load_png
    config, paths = load_run_config(args.config)
    ckpt = args.ckpt or paths.get("ckpt")
    _guard_outputs([args.input, ckpt, args.config] + list(args.mask or []), [args.out])
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    source = masks = prompts = None
    if args.input:
        if not args.mask or not args.local_prompt:
            raise BadFlags("--in needs --mask and --local-prompt")
        source = load_png(args.input).data
        masks = _masks_from_args(args)
        prompts = (tuple(args.local_prompt), args.source_prompt or "", args.target_prompt or "")
    rows = ablation_rows(_load_model(ckpt), variants, seeds, config, source, masks, prompts)
    _write_scores_csv(args.out, rows, ("variant", "seed") + SCORE_FIELDS)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite
    results, seconds = run_suite(args.seed)
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'} {r.name} err={r.error:.3e} tol={r.tolerance:.0e}")
    failed = [r for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} passed in {seconds:.1f}s")
    if failed:
        raise CannyEditError(f"gradcheck-failed: {', '.join(r.name for r in failed)}")
    return 0


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cannyedit", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("canny", help="edge map of a PNG")
    c.add_argument("--in", dest="input", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--sigma", type=float, default=1.0)
    c.add_argument("--low", type=float, default=0.1)
    c.add_argument("--high", type=float, default=0.3)
    c.set_defaults(func=cmd_canny)

    t = sub.add_parser("train", help="train the toy model on synthetic shapes")
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--losses", help="write the per-step loss curve here")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("invert", help="invert an image, caching ControlNet outputs")
    i.add_argument("--in", dest="input", required=True)
    i.add_argument("--prompt", default="")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--config")
    i.add_argument("--out", required=True, help="npz holding x_T")
    i.add_argument("--cache", help="optional ControlCache dump (npz)")
    i.add_argument("--recon", help="optional round-trip reconstruction PNG")
    i.set_defaults(func=cmd_invert)

    e = sub.add_parser("edit", help="add / replace / remove inside a region")
    e.add_argument("--in", dest="input", required=True)
    hint = e.add_mutually_exclusive_group()
    hint.add_argument("--mask", action="append", help="PNG mask, nonzero = editable (repeat per region)")
    hint.add_argument("--hints", help="JSON point hints")
    e.add_argument("--task", choices=("add", "replace", "remove"), default="add")
    e.add_argument("--local-prompt", action="append")
    e.add_argument("--source-prompt")
    e.add_argument("--target-prompt")
    e.add_argument("--negative-prompt")
    e.add_argument("--config")
    e.add_argument("--ckpt")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")
    e.add_argument("--report")
    e.add_argument("--scores")
    e.set_defaults(func=cmd_edit)

    a = sub.add_parser("ablate", help="variant x seed table of proxy scores")
    a.add_argument("--ckpt")
    a.add_argument("--config")
    a.add_argument("--variants", default="selective,no_cc,full_cc")
    a.add_argument("--seeds", default="0,1,2,3,4")
    a.add_argument("--in", dest="input")
    a.add_argument("--mask", action="append")
    a.add_argument("--local-prompt", action="append")
    a.add_argument("--source-prompt")
    a.add_argument("--target-prompt")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)

    g = sub.add_parser("gradcheck", help="finite-difference audit of every primitive and the miniature model")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)
    return p


def _fail(code: int, message: str) -> int:
    print(json.dumps({"error": ERROR_NAMES.get(code, "error"), "exit_code": code, "message": message},
                     sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except BadFlags as e:
        return _fail(2, str(e))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except CannyEditError as e:
        return _fail(e.exit_code, str(e))
    except FileNotFoundError as e:
        return _fail(3, f"io-error: {e}")
    except FloatingPointError as e:
        return _fail(5, str(e))
    except ValueError as e:
        return _fail(4, f"invalid-request: {e}")


if __name__ == "__main__":
    sys.exit(main())
