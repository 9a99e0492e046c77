"""Command line entry point ``rpkit``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from rpkit import __version__, codec, dataset, synth
from rpkit import embedding as E
from rpkit import evaluation as ev
from rpkit import html as H
from rpkit import vc as VC
from rpkit.nn import CheckpointError, ModelNotTrained, OptimizerConfig, load_checkpoint, read_config, save_checkpoint
from rpkit.nn.optim import DivergenceDetected

log = logging.getLogger("rpkit")

# Hyperparameters of the full-size setup, recorded for reference; desk-scale runs
# use the smaller defaults below.
FULL_SCALE = {
    "steps": 1_000_000,
    "batch": 300,
    "lr": 1.2e-4,
    "ar": {"enc_layers": 6, "dec_layers": 6},
    "dm": {"layers": 12, "T": 1000},
    "lambda_kl": 1e-6,
}

DESK = {
    "train-vae": {"steps": 2000, "batch": 128, "lr": 1e-3, "synthetic_share": 0.5},
    "train-ar": {"steps": 1000, "batch": 8, "lr": 5e-4},
    "train-dm": {"steps": 1000, "batch": 8, "lr": 5e-4},
    "train-fid": {"steps": 1500, "batch": 16, "lr": 1e-3},
}


def cache_dir():
    return Path(os.environ.get("RPKIT_CACHE", Path.home() / ".cache" / "rpkit"))


def _settings(args, command):
    cfg = dict(DESK.get(command, {}))
    if getattr(args, "paper_scale", False):
        cfg.update({k: FULL_SCALE[k] for k in ("steps", "batch", "lr") if k in cfg})
    if getattr(args, "config", None):
        cfg.update(json.loads(Path(args.config).read_text()))
    for key in ("steps", "batch", "lr"):
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    return cfg


def _log_run(args, settings=None):
    shown = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    log.info("run %s", json.dumps({"args": shown, "settings": settings or {}}, sort_keys=True, default=str))


# ---- model checkpoints -------------------------------------------------------------------

def _save_bundle(path, parts, config):
    tensors = {}
    for prefix, module in parts.items():
        for k, v in module.state_dict().items():
            tensors[f"{prefix}.{k}"] = v
    save_checkpoint(path, tensors, config)
    log.info("wrote %s", path)


def _load_vae_from(path):
    from rpkit.vae import RpVae, VaeConfig
    cfg = read_config(path)
    vcfg = cfg["vae"] if "vae" in cfg else cfg
    tensors, _ = load_checkpoint(path)
    vae = RpVae(VaeConfig(vcfg["latent"], tuple(vcfg["hidden"]), vcfg["lambda_kl"], vcfg.get("in_std", 0.3)))
    vae.load_state_dict({k[4:]: v for k, v in tensors.items() if k.startswith("vae.")})
    return vae, cfg, tensors


def load_generator(path):
    """``(model, vae)`` from a generator checkpoint written by train-ar / train-dm."""
    from rpkit.ar import ArConfig, ArGenerator
    from rpkit.diffusion import DiffusionGenerator, DmConfig
    vae, cfg, tensors = _load_vae_from(path)
    mcfg = dict(cfg["model"])
    kind = mcfg.pop("kind")
    latent = mcfg.pop("latent")
    if kind == "ar":
        model = ArGenerator(ArConfig(**mcfg), latent)
    elif kind == "dm":
        model = DiffusionGenerator(DmConfig(**mcfg), latent)
    else:
        raise CheckpointError(f"{path}: not a generator checkpoint ({kind})")
    model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("model.")})
    model.trained = True
    return model, vae


def load_fid_classifier(path):
    vae, cfg, tensors = _load_vae_from(path)
    c = dict(cfg["model"])
    if c.pop("kind") != "fid":
        raise CheckpointError(f"{path}: not an FID classifier checkpoint")
    clf = ev.FidClassifier(c["variant"], c["latent"], c["d"], c["layers"], c["heads"], c["d_sem"])
    clf.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("model.")})
    return clf, vae


# ---- commands --------------------------------------------------------------------------

def cmd_ingest(args):
    _log_run(args)
    m = dataset.build_dataset(args.out, input_dir=args.input, vc_threshold=args.vc_threshold,
                              split=args.split, seed=args.seed, workers=args.workers)
    print(json.dumps({"samples": len(m["samples"]), "candidates": m["candidates"]}, sort_keys=True))


def cmd_synth(args):
    spec = synth.SynthSpec(min_elements=args.min_elements, max_elements=args.max_elements,
                           style_groups=args.style_groups)
    _log_run(args, spec.to_dict())
    m = dataset.build_dataset(args.out, spec=spec, n_pages=args.pages, vc_threshold=args.vc_threshold,
                              split=args.split, seed=args.seed)
    print(json.dumps({"samples": len(m["samples"]), "candidates": m["candidates"]}, sort_keys=True))


def cmd_vc(args):
    _log_run(args)
    page = dataset.load_page(args.html, args.rps)
    print(json.dumps(VC.vc_total(page).to_dict(), sort_keys=True))


def _train_samples(data_dir, split="train"):
    from rpkit.train import make_samples
    pages = dataset.load_dataset(data_dir, split)
    if not pages:
        raise dataset.EmptyAfterFilter(f"no {split} pages in {data_dir}")
    return make_samples(pages)


def cmd_train_vae(args):
    from rpkit import vae as V
    s = _settings(args, "train-vae")
    _log_run(args, s)
    pages = dataset.load_dataset(args.data, "train")
    if not pages:
        raise dataset.EmptyAfterFilter(f"no train pages in {args.data}")
    corpus = np.concatenate([p.token_matrix() for p in pages])
    share = float(s["synthetic_share"])
    sampler = V.mixed_sampler([V.uniform_sampler(), V.corpus_sampler(corpus)], [share, 1 - share])
    vae = V.RpVae(V.VaeConfig(lambda_kl=FULL_SCALE["lambda_kl"]), seed=args.seed)
    rep = V.train_vae(vae, sampler, int(s["steps"]), int(s["batch"]),
                      OptimizerConfig(learning_rate=float(s["lr"])), seed=args.seed,
                      eval_tokens=corpus, log_every=max(1, int(s["steps"]) // 10))
    _save_bundle(args.out, {"vae": vae}, {"vae": vae.config_dict(), "seed": args.seed, "settings": s})
    print(json.dumps({"steps": rep.steps, "final_loss": rep.losses[-1] if rep.losses else None,
                      "corpus_accuracy": float(rep.accuracy.mean())}, sort_keys=True))


def _train_gen(args, kind):
    from rpkit.train import train_generator
    s = _settings(args, f"train-{kind}")
    _log_run(args, s)
    vae, _, _ = _load_vae_from(args.vae)
    samples = _train_samples(args.data)
    if kind == "ar":
        from rpkit.ar import ArConfig, ArGenerator
        cfg = ArConfig.full_scale() if args.paper_scale else ArConfig()
        model = ArGenerator(cfg, vae.latent_dim, seed=args.seed)
    else:
        from rpkit.diffusion import DiffusionGenerator, DmConfig
        cfg = DmConfig.full_scale() if args.paper_scale else DmConfig()
        model = DiffusionGenerator(cfg, vae.latent_dim, seed=args.seed)
    rep = train_generator(model, vae, samples, int(s["steps"]), int(s["batch"]),
                          OptimizerConfig(learning_rate=float(s["lr"]), clip_norm=1.0), seed=args.seed,
                          log_every=max(1, int(s["steps"]) // 10))
    model.trained = True
    out = args.out or cache_dir() / f"{kind}.ckpt"
    _save_bundle(out, {"model": model, "vae": vae},
                 {"model": model.config_dict(), "vae": vae.config_dict(), "seed": args.seed, "settings": s})
    print(json.dumps({"steps": rep.steps, "final_loss": rep.losses[-1]}, sort_keys=True))


def cmd_train_ar(args):
    _train_gen(args, "ar")


def cmd_train_dm(args):
    _train_gen(args, "dm")


def cmd_train_fid(args):
    s = _settings(args, "train-fid")
    _log_run(args, s)
    vae, _, _ = _load_vae_from(args.vae)
    samples = _train_samples(args.data, None if args.all_splits else "train")
    clf, rep = ev.train_fid_classifier(samples, vae, args.variant, int(s["steps"]), int(s["batch"]),
                                       seed=args.seed, optim=OptimizerConfig(learning_rate=float(s["lr"])),
                                       log_every=max(1, int(s["steps"]) // 10))
    out = args.out or cache_dir() / f"fid-{args.variant}.ckpt"
    _save_bundle(out, {"model": clf, "vae": vae},
                 {"model": clf.config_dict(), "vae": vae.config_dict(), "seed": args.seed, "settings": s,
                  "held_out_accuracy": rep.held_out_accuracy})
    print(json.dumps({"variant": args.variant, "held_out_accuracy": rep.held_out_accuracy,
                      "train_accuracy": rep.train_accuracy}, sort_keys=True))


def generate_page(model, vae, page, seed):
    from rpkit.train import make_samples
    smp = make_samples([page], require_rps=False)[0]
    toks = model.generate([smp], vae, seed=seed)[0]
    return {eid: toks[i] for i, eid in enumerate(smp.ids)}


def cmd_generate(args):
    _log_run(args)
    ckpt = args.ckpt or cache_dir() / f"{args.model}.ckpt"
    model, vae = load_generator(ckpt)
    kind = "ar" if type(model).__name__ == "ArGenerator" else "dm"
    if kind != args.model:
        raise CheckpointError(f"{ckpt} holds a {kind} model, not {args.model}")
    page = dataset.load_page(args.html)
    rps = generate_page(model, vae, page, args.seed)
    text = codec.to_json(rps)
    Path(args.out).write_text(text)
    if args.css:
        Path(args.css).write_text(codec.emit_css(rps))


def cmd_generate_dir(args):
    """Generate for every sample of a dataset split into an output directory."""
    _log_run(args)
    model, vae = load_generator(args.ckpt or cache_dir() / f"{args.model}.ckpt")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    m = dataset.read_manifest(args.data)
    for i, s in enumerate(m["samples"]):
        if args.split and s["split"] != args.split:
            continue
        page = dataset.load_page(Path(args.data) / s["html"], name=s["name"])
        rps = generate_page(model, vae, page, args.seed + i)
        (out / f"{s['name']}.rps.json").write_text(codec.to_json(rps))
        (out / f"{s['name']}.html").write_text((Path(args.data) / s["html"]).read_text())


def cmd_render_css(args):
    _log_run(args)
    rps = codec.from_json(Path(args.rps).read_text())
    css = codec.emit_css(rps)
    if args.out:
        Path(args.out).write_text(css)
    else:
        sys.stdout.write(css)


METRICS = ("fid", "fid-layout", "fid-style", "iou", "sc")
REPORT_KEY = {"fid": "fid", "fid-layout": "fid_layout", "fid-style": "fid_style", "iou": "ele_iou", "sc": "sc_score"}


def evaluate_dirs(real_dir, gen_dir, metrics, fid_dir=None):
    real = dataset.load_rps_dir(real_dir)
    gen = dataset.load_rps_dir(gen_dir)
    names = sorted(real)
    if not names:
        raise dataset.DatasetError(f"no .rps.json files in {real_dir}")
    missing = [n for n in names if n not in gen]
    if missing:
        raise ev.IdMismatch(f"generated pages missing for {missing[:5]}")
    report = {"pages": len(names)}
    if "iou" in metrics:
        report["ele_iou"] = round(float(np.mean([ev.page_ele_iou(real[n], gen[n]) for n in names])), 10)
    if "sc" in metrics:
        report["sc_score"] = round(float(np.mean([ev.sc_score(real[n], gen[n]) for n in names])), 10)
    fid_kinds = [m for m in metrics if m.startswith("fid")]
    if fid_kinds:
        from rpkit.train import make_samples
        pages = [dataset.load_page(Path(real_dir) / f"{n}.html", name=n) for n in names]
        samples = make_samples(pages, require_rps=False)
        for m in fid_kinds:
            variant = "overall" if m == "fid" else m.split("-")[1]
            path = Path(fid_dir or cache_dir()) / f"fid-{variant}.ckpt"
            clf, vae = load_fid_classifier(path)
            toks_r = [np.stack([real[n][e] for e in s.ids]) for n, s in zip(names, samples)]
            toks_g = [np.stack([gen[n][e] for e in s.ids]) for n, s in zip(names, samples)]
            fr = ev.classifier_features(clf, vae, samples, toks_r)
            fg = ev.classifier_features(clf, vae, samples, toks_g)
            report[REPORT_KEY[m]] = round(ev.fid(fr, fg), 10)
    return report


def cmd_eval(args):
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    bad = [m for m in metrics if m not in METRICS]
    if bad:
        raise ValueError(f"unknown metrics {bad}; choose from {', '.join(METRICS)}")
    _log_run(args)
    report = evaluate_dirs(args.real, args.gen, metrics, args.fid_dir)
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


# ---- parser -------------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="rpkit", description="Rendering-parameter generation toolkit")
    p.add_argument("--version", action="version", version=f"rpkit {__version__}")
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--seed", type=int, default=0)
        sp.set_defaults(func=func)
        return sp

    def add_train(sp):
        sp.add_argument("--steps", type=int)
        sp.add_argument("--batch", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--config", help="JSON file with settings overrides")
        sp.add_argument("--paper-scale", action="store_true", help="use full-size hyperparameters")

    sp = add("ingest", cmd_ingest, "build a dataset from NAME.html + NAME.rps.json pairs")
    sp.add_argument("--input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--vc-threshold", type=float, default=0.1)
    sp.add_argument("--split", type=float, default=0.8)
    sp.add_argument("--workers", type=int, default=1)

    sp = add("synth", cmd_synth, "build a synthetic dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--pages", type=int, default=100)
    sp.add_argument("--min-elements", type=int, default=32)
    sp.add_argument("--max-elements", type=int, default=128)
    sp.add_argument("--style-groups", type=int)
    sp.add_argument("--vc-threshold", type=float, default=0.1)
    sp.add_argument("--split", type=float, default=0.8)

    sp = add("vc", cmd_vc, "visual complexity of one page")
    sp.add_argument("--html", required=True)
    sp.add_argument("--rps", required=True)

    sp = add("train-vae", cmd_train_vae, "pretrain the element VAE")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    add_train(sp)

    for name, func in (("train-ar", cmd_train_ar), ("train-dm", cmd_train_dm)):
        sp = add(name, func, f"train the {name[6:].upper()} generator jointly with the VAE")
        sp.add_argument("--data", required=True)
        sp.add_argument("--vae", required=True)
        sp.add_argument("--out")
        add_train(sp)

    sp = add("train-fid", cmd_train_fid, "train a real-vs-polluted classifier for FID features")
    sp.add_argument("--data", required=True)
    sp.add_argument("--vae", required=True)
    sp.add_argument("--variant", choices=ev.VARIANTS, default="overall")
    sp.add_argument("--out")
    sp.add_argument("--all-splits", action="store_true")
    add_train(sp)

    sp = add("generate", cmd_generate, "generate RPs for one HTML page")
    sp.add_argument("--model", choices=["ar", "dm"], required=True)
    sp.add_argument("--html", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--css")
    sp.add_argument("--ckpt")

    sp = add("generate-dir", cmd_generate_dir, "generate RPs for every page of a dataset")
    sp.add_argument("--model", choices=["ar", "dm"], required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--split", choices=["train", "test"])
    sp.add_argument("--ckpt")

    sp = add("render-css", cmd_render_css, "turn RP-JSON into CSS")
    sp.add_argument("--rps", required=True)
    sp.add_argument("--out")

    sp = add("eval", cmd_eval, "score generated pages against real ones")
    sp.add_argument("--real", required=True)
    sp.add_argument("--gen", required=True)
    sp.add_argument("--metrics", default="iou,sc")
    sp.add_argument("--fid-dir", help="directory holding fid-{overall,layout,style}.ckpt")
    sp.add_argument("--out")
    return p


ERRORS = (codec.CodecError, H.HtmlError, dataset.DatasetError, dataset.EmptyAfterFilter, CheckpointError,
          ModelNotTrained, DivergenceDetected, synth.BadSpec, ev.IdMismatch, ev.LengthMismatch,
          VC.MissingStyle, ValueError, KeyError, OSError)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ERRORS as e:
        print(f"rpkit {args.command}: error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
