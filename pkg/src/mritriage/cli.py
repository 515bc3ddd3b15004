"""Command-line front end: ``gen``, ``train``, ``simulate`` and ``stats``.

Every command writes its effective configuration to ``<out-dir>/config.json``
so that a run can be reproduced with ``--config``. Exit codes: 0 success,
1 validation error, 2 data or runtime error.
"""

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys

import numpy as np

from . import cohort_gen, noise_correction, roc_stats, triage_sim
from ._rng import derive_rng
from .errors import DataError, TrainingError, ValidationError

logger = logging.getLogger("mritriage")

EXIT_OK, EXIT_VALIDATION, EXIT_DATA = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def _json_safe(obj):
    if isinstance(obj, float):
        return None if not math.isfinite(obj) else obj
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.generic):
        return _json_safe(obj.item())
    if isinstance(obj, np.ndarray):
        return _json_safe(obj.tolist())
    return obj


def write_json(path, obj):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(_json_safe(obj), fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def _sha256(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _out(args, name):
    return os.path.join(args.out_dir, name)


def _echo_config(args):
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config")}
    write_json(_out(args, "config.json"), cfg)


def _load_transition(path):
    return noise_correction.ALARM_T if path is None else noise_correction.TransitionMatrix.load(path)


# -- gen ----------------------------------------------------------------------

def cmd_gen(args):
    overrides = {
        "n_exams": args.n_exams,
        "abnormal_fraction": args.abnormal_frac,
        "days": args.days,
        "classifier_sensitivity": args.sensitivity,
        "classifier_specificity": args.specificity,
        "site": args.site,
    }
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if args.transition is not None:
        overrides["label_noise_T"] = _load_transition(args.transition)
    if args.preset is not None:
        params = cohort_gen.preset(args.preset, seed=args.seed, **overrides)
    else:
        if "n_exams" not in overrides or "abnormal_fraction" not in overrides:
            raise ValidationError("without --preset, --n-exams and --abnormal-frac are required")
        params = cohort_gen.CohortParams(seed=args.seed, **overrides)
    feature_params = cohort_gen.FeatureParams.separated(
        params.n_exams, d=args.n_features, separation=args.separation, seed=args.seed)

    exams = cohort_gen.generate_cohort(params)
    true = np.array([e.true_label for e in exams])
    features = cohort_gen.generate_features(feature_params, true, ids=[e.id for e in exams])
    features = noise_correction.with_noisy_labels(features, [e.noisy_label for e in exams])

    os.makedirs(args.out_dir, exist_ok=True)
    triage_sim.write_cohort_csv(_out(args, "cohort.csv"), exams)
    noise_correction.write_features_csv(_out(args, "features.csv"), features)
    manifest = {
        "seed": args.seed,
        "preset": args.preset,
        "cohort": {
            "n_exams": params.n_exams,
            "abnormal_fraction": params.abnormal_fraction,
            "days": params.days,
            "arrival_weights": list(params.arrival_weights),
            "delay_model": {str(c): list(params.delay_model[c]) for c in (0, 1)},
            "delay_model_underlying": {str(c): list(cohort_gen.underlying_delay_params(params, c))
                                       for c in (0, 1)},
            "classifier_sensitivity": params.classifier_sensitivity,
            "classifier_specificity": params.classifier_specificity,
            "label_noise_T": params.label_noise_T.t.tolist(),
            "site": params.site,
        },
        "features": {"d": feature_params.d, "separation": args.separation,
                     "class_cov_scale": feature_params.class_cov_scale,
                     "bayes_auc": cohort_gen.bayes_auc(feature_params)},
        "files": {name: _sha256(_out(args, name)) for name in ("cohort.csv", "features.csv")},
    }
    write_json(_out(args, "manifest.json"), manifest)
    print(f"wrote {len(exams)} exams to {args.out_dir}")


# -- train --------------------------------------------------------------------

def _repeat_seed(root, r):
    return int(derive_rng(root, "train", r).integers(2**63))


def cmd_train(args):
    data = noise_correction.read_features_csv(args.features)
    evaluation = data if args.test is None else noise_correction.read_features_csv(args.test)
    if args.test is not None and evaluation.n_features != data.n_features:
        raise DataError("test features have a different number of columns")
    if len(set(data.noisy_labels.tolist())) < 2:
        raise DataError(f"{args.features}: noisy labels contain a single class")
    t = _load_transition(args.transition)
    arms = {"baseline": noise_correction.TransitionMatrix.identity(), "corrected": t}

    models = {arm: [] for arm in arms}
    metrics = {arm: {"auc_true": [], "auc_noisy": []} for arm in arms}
    first_scores = {}
    for r in range(args.repeats):
        seed = _repeat_seed(args.seed, r)
        cfg = noise_correction.TrainConfig(
            learning_rate=args.lr, lr_decay_factor=args.lr_decay, patience_epochs=args.patience,
            max_epochs=args.epochs, seed=seed, batch_size=args.batch_size)
        for arm, arm_t in arms.items():
            clf = noise_correction.train(data, arm_t, cfg)
            score = noise_correction.predict(clf, evaluation.features)[:, 1]
            models[arm].append({"seed": seed, **clf.to_dict()})
            if evaluation.true_labels is not None:
                metrics[arm]["auc_true"].append(roc_stats.auc(scores=score, labels=evaluation.true_labels))
            metrics[arm]["auc_noisy"].append(roc_stats.auc(scores=score, labels=evaluation.noisy_labels))
            if r == 0:
                first_scores[arm] = score
            logger.info("repeat %d %s done", r, arm)

    labels = evaluation.true_labels if evaluation.true_labels is not None else evaluation.noisy_labels
    out = {
        "repeats": args.repeats,
        "evaluated_on": args.test or args.features,
        "label_for_comparison": "true" if evaluation.true_labels is not None else "noisy",
        "transition": t.t.tolist(),
        "arms": {arm: {k: (roc_stats.summarize_repeats(v) if v else None) for k, v in m.items()}
                 for arm, m in metrics.items()},
        "delong_repeat0": roc_stats.delong_test(first_scores["corrected"], first_scores["baseline"],
                                                labels).to_dict(),
    }
    os.makedirs(args.out_dir, exist_ok=True)
    write_json(_out(args, "models.json"), models)
    write_json(_out(args, "metrics.json"), out)
    with open(_out(args, "scores.csv"), "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "score_a", "score_b", "label"])
        for i, a, b, y in zip(evaluation.ids, first_scores["baseline"], first_scores["corrected"], labels):
            w.writerow([i, repr(float(a)), repr(float(b)), int(y)])
    for arm in arms:
        s = out["arms"][arm]["auc_true"] or out["arms"][arm]["auc_noisy"]
        print(f"{arm}: AUC {s['mean']:.4f} +/- {s['sd']:.4f} over {args.repeats} repeat(s)")


# -- simulate -----------------------------------------------------------------

def _render_histogram(path, null, observed, historical):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "mritriage"
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for ax, cls, key in ((axes[0], 1, "abnormal"), (axes[1], 0, "normal")):
        ax.hist(null.column(key), bins=30, color="tab:blue", alpha=0.8, label="random priority")
        ax.axvline(observed[cls].mean, color="tab:red", label="prioritized")
        ax.axvline(historical[cls].mean, color="tab:red", linestyle="--", label="historical")
        ax.set_title(f"{key} exams")
        ax.set_xlabel("mean report delay (days)")
    axes[0].set_ylabel("runs")
    axes[0].legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def cmd_simulate(args):
    exams = triage_sim.read_cohort_csv(args.cohort)
    if not exams:
        raise DataError(f"{args.cohort}: no exams")
    schedule = triage_sim.derive_daily_capacity(exams)
    weight = 0.5 if args.null_weight == "fair" else triage_sim.prevalence_weight(exams)
    comparison = triage_sim.compare_policies(exams, schedule, args.policy, args.repeats, args.seed,
                                             args.label, weight, args.jobs, args.drain_first)
    result, null = comparison.result, comparison.null

    os.makedirs(args.out_dir, exist_ok=True)
    with open(_out(args, "delays.csv"), "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "policy", "report_day", "delay"])
        for e in exams:
            w.writerow([e.id, "historical", e.historical_report_day, e.historical_delay])
        for e in exams:
            w.writerow([e.id, args.policy, result.report_day[e.id], result.delay(e)])
    with open(_out(args, "null_hist.csv"), "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "mean_abnormal_delay", "mean_normal_delay"])
        for r, (ab, no) in enumerate(null.runs.tolist()):
            w.writerow([r, repr(ab), repr(no)])
    summary = comparison.to_dict()
    summary.update({"stratified_by": args.label, "null_weight": weight, "seed": args.seed,
                    "total_delay": {"historical": sum(e.historical_delay for e in exams),
                                    args.policy: result.total_delay()}})
    write_json(_out(args, "summary.json"), summary)
    _render_histogram(_out(args, "null_hist.svg"), null, comparison.prioritized, comparison.historical)
    print(comparison.format_table())
    print(f"p (abnormal, lower) = {comparison.p_values['abnormal_lower']:.4g}; "
          f"p (normal, upper) = {comparison.p_values['normal_upper']:.4g}")


# -- stats --------------------------------------------------------------------

def _read_scores(path):
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in ("id", "score_a", "label"):
            if col not in header:
                raise DataError(f"{path}: missing column {col!r}")
        rows = list(reader)
    has_b = "score_b" in header
    try:
        a = np.array([float(r["score_a"]) for r in rows])
        b = np.array([float(r["score_b"]) for r in rows]) if has_b else None
        y = np.array([int(r["label"]) for r in rows])
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    return a, b, y


def _read_ratings(path):
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "id" or len(header) < 3:
            raise DataError(f"{path}: expected header 'id,<category>,<category>,...'")
        try:
            table = [[int(c) for c in row[1:]] for row in reader]
        except ValueError as exc:
            raise DataError(f"{path}: {exc}") from None
    return header[1:], np.array(table)


def _parse_operating_point(text):
    if text == "youden":
        return "youden", None
    kind, _, value = text.partition(":")
    if kind not in ("sensitivity", "threshold") or not value:
        raise ValidationError(f"bad --operating-point {text!r}; use youden, sensitivity:S or threshold:T")
    try:
        v = float(value)
    except ValueError:
        raise ValidationError(f"bad --operating-point value {value!r}") from None
    return ("sensitivity_floor" if kind == "sensitivity" else "threshold"), v


def cmd_stats(args):
    if args.scores is None and args.ratings is None:
        raise ValidationError("stats needs --scores and/or --ratings")
    strategy, value = _parse_operating_point(args.operating_point)
    out = {}
    if args.scores is not None:
        a, b, y = _read_scores(args.scores)
        op = roc_stats.operating_point(roc_stats.roc_curve(scores=a, labels=y), strategy, value)
        out["auc_a"] = roc_stats.auc(scores=a, labels=y)
        out["operating_point_a"] = {"strategy": args.operating_point, "threshold": op.threshold,
                                    "sensitivity": op.sensitivity, "specificity": op.specificity}
        if b is not None:
            out["auc_b"] = roc_stats.auc(scores=b, labels=y)
            out["delong"] = roc_stats.delong_test(a, b, y).to_dict()
    if args.ratings is not None:
        categories, table = _read_ratings(args.ratings)
        out["fleiss_kappa"] = {"categories": categories, "subjects": int(table.shape[0]),
                               "kappa": roc_stats.fleiss_kappa(table)}
    os.makedirs(args.out_dir, exist_ok=True)
    write_json(_out(args, "stats.json"), out)
    print(json.dumps(_json_safe(out), indent=2, sort_keys=True))


# -- parser -------------------------------------------------------------------

def _common():
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=0, help="root seed for every random sub-stream")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for permutation repeats")
    p.add_argument("--out-dir", default=".", help="directory for all outputs")
    p.add_argument("--config", help="JSON file of option defaults; command-line flags override it")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser():
    parser = _Parser(prog="mritriage", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = _common()

    g = sub.add_parser("gen", parents=[common], help="generate a synthetic cohort and feature set")
    g.add_argument("--preset", choices=sorted(cohort_gen.PRESETS))
    g.add_argument("--n-exams", type=int)
    g.add_argument("--abnormal-frac", type=float)
    g.add_argument("--days", type=int)
    g.add_argument("--sensitivity", type=float)
    g.add_argument("--specificity", type=float)
    g.add_argument("--site")
    g.add_argument("--transition", help="JSON transition matrix for label noise (default: the alarm-study estimate)")
    g.add_argument("--n-features", type=int, default=16)
    g.add_argument("--separation", type=float, default=2.0,
                   help="distance between class means, in noise standard deviations")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", parents=[common], help="train baseline and noise-corrected classifiers")
    t.add_argument("--features", required=True)
    t.add_argument("--test", help="separate evaluation feature file (default: the training file)")
    t.add_argument("--transition", help="JSON transition matrix (default: the alarm-study estimate)")
    t.add_argument("--repeats", type=int, default=5)
    t.add_argument("--epochs", type=int, default=300)
    t.add_argument("--lr", type=float, default=1.0)
    t.add_argument("--lr-decay", type=float, default=10.0)
    t.add_argument("--patience", type=int, default=5)
    t.add_argument("--batch-size", type=int)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("simulate", parents=[common], help="replay the reporting queue with triage")
    s.add_argument("--cohort", required=True)
    s.add_argument("--policy", choices=["two_class_priority", "fifo"], default="two_class_priority")
    s.add_argument("--repeats", type=int, default=1000)
    s.add_argument("--label", choices=["noisy", "true"], default="noisy",
                   help="label used to stratify delays")
    s.add_argument("--null-weight", choices=["fair", "prevalence"], default="fair",
                   help="P(abnormal) for random priorities in the null")
    s.add_argument("--drain-first", action="store_true",
                   help="spend each day's capacity before that day's arrivals join the queue")
    s.set_defaults(func=cmd_simulate)

    st = sub.add_parser("stats", parents=[common], help="AUC, DeLong test and Fleiss' kappa")
    st.add_argument("--scores", help="CSV with id,score_a[,score_b],label")
    st.add_argument("--ratings", help="CSV with id,<category counts...>")
    st.add_argument("--operating-point", default="youden")
    st.set_defaults(func=cmd_stats)
    return parser


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(cfg, dict):
            raise ValidationError("config file must hold a JSON object")
        cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
        known = set(vars(args)) - {"func", "command", "config"}
        unknown = sorted(set(cfg) - known)
        if unknown:
            raise ValidationError(f"unknown config key {unknown[0]!r} for {args.command}")
        sub = parser._subparsers._group_actions[0].choices[args.command]
        sub.set_defaults(**cfg)
        args = parser.parse_args(argv)
    if args.jobs < 1:
        raise ValidationError("--jobs must be >= 1")
    if getattr(args, "repeats", 1) < 1:
        raise ValidationError("--repeats must be >= 1")
    return args


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        args.func(args)
        _echo_config(args)
    except ValidationError as exc:
        print(f"mritriage: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (DataError, TrainingError, OSError) as exc:
        print(f"mritriage: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
