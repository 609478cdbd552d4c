"""Command-line front door: one subcommand per pipeline stage.

simulate -> grade -> fit-irt -> filter -> metrics / sweep / heatmap, plus
serve-assets for the image server. Outputs are plain text files and are
byte-identical across repeated invocations for fixed inputs and seeds.

Exit codes: 0 success, 2 validation failure, 3 backend failure, 4 an
undefined-metric condition.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .assets import AssetStore, build_server, DEFAULT_TTL_SECONDS
from .errors import (
    BackendError,
    GradekitError,
    UndefinedMetricError,
    ValidationError,
)
from .exam import ExamSpec, Provenance, ProblemType, load_exam_spec, load_scores, normalize
from .filters import (
    PartialCreditFilterConfig,
    RiskFilterConfig,
    compose,
    export_review_manifest,
    load_review_manifest,
    partial_credit_filter,
    risk_filter,
    type_filter,
)
from .grading import OpenAiChatBackend, SimulatedBackend, grade_exam
from .irt import FitConfig, IrtModel, expected_scores, fit_2pl, risk_matrix
from .metrics import binary_report, multiclass_report, ols_regression, paired_totals
from .reports import (
    export_risk_heatmap,
    quality_by_type,
    run_sweep,
    scatter_csv,
    type_quality_csv,
)
from .synthetic import (
    DEFAULT_NOISE,
    NoiseModel,
    PopulationSpec,
    apply_noise,
    generate_population,
    reference_exam_spec,
)

_PLACEHOLDER_PNG = bytes.fromhex(
    "89504e470d0a1a0a0000000d49484452000000010000000108060000001f15c489"
    "0000000d49444154789c626001000000ffff03000006000557bfabd40000000049454e44ae426082"
)


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, newline="")


def _read_spec(path: str) -> ExamSpec:
    return load_exam_spec(Path(path).read_text())


def _read_scores(path: str, spec: ExamSpec, provenance: Provenance):
    return load_scores(Path(path).read_text(), spec, provenance)


def _parse_types(raw: str) -> set[ProblemType]:
    names = [n.strip() for n in raw.split(",") if n.strip()]
    return {ProblemType(n) for n in names}


def _noise_from(path: str | None) -> NoiseModel:
    if path is None:
        return DEFAULT_NOISE
    return NoiseModel.from_json(Path(path).read_text())


def cmd_simulate(args) -> int:
    spec = _read_spec(args.spec) if args.spec else reference_exam_spec()
    pspec = PopulationSpec.from_exam(spec, args.students, seed=args.seed)
    population = generate_population(pspec)
    noise = _noise_from(args.noise)
    ai = apply_noise(population.truth, spec, noise, args.seed)
    out = Path(args.out_dir)
    _write(out / "spec.json", spec.to_json())
    _write(out / "truth.csv", population.truth.to_csv())
    _write(out / "ai.csv", ai.to_csv())
    params = {
        "seed": args.seed,
        "theta": [float(v) for v in population.theta],
        "parts": [
            {"id": p, "a": float(population.a[j]), "b": float(population.b[j])}
            for j, p in enumerate(population.truth.parts)
        ],
    }
    _write(out / "population.json", json.dumps(params, indent=2) + "\n")
    print(f"simulated {args.students} students x {len(spec.part_ids)} parts -> {out}")
    return 0


def _simulated_store(spec: ExamSpec, roster) -> AssetStore:
    store = AssetStore()
    for student in roster:
        for page in range(1, spec.page_count + 1):
            store.register_page(_PLACEHOLDER_PNG, student, page)
    for page in range(1, spec.page_count + 1):
        store.register_rubric(spec.rubric_pages[page], _PLACEHOLDER_PNG)
    return store


def _populated_store(args, spec: ExamSpec, roster) -> AssetStore:
    if args.pages_dir:
        store = AssetStore(args.store_dir) if args.store_dir else AssetStore()
        pages = Path(args.pages_dir)
        for student in roster:
            for page in range(1, spec.page_count + 1):
                store.register_page(
                    (pages / f"student-{student}-page-{page}.png").read_bytes(), student, page
                )
        for page in range(1, spec.page_count + 1):
            store.register_rubric(
                spec.rubric_pages[page], (pages / f"rubric-page-{page}.png").read_bytes()
            )
        return store
    if args.store_dir:
        return AssetStore(args.store_dir)
    raise ValidationError("grading with a remote backend needs --store-dir or --pages-dir")


def cmd_grade(args) -> int:
    spec = _read_spec(args.spec)
    truth = _read_scores(args.truth, spec, Provenance.SYNTHETIC) if args.truth else None
    if args.roster:
        roster = [int(line) for line in Path(args.roster).read_text().split() if line.strip()]
    elif truth is not None:
        roster = list(truth.students)
    else:
        raise ValidationError("need --roster or --truth to know whom to grade")

    if args.backend == "simulated":
        if truth is None:
            raise ValidationError("the simulated backend needs --truth")
        store = _simulated_store(spec, roster)
        backend = SimulatedBackend(
            truth, spec, _noise_from(args.noise), args.seed, store.resolve_url
        )
    else:
        store = _populated_store(args, spec, roster)
        backend = OpenAiChatBackend(model=args.model)

    run = grade_exam(
        spec,
        roster,
        store,
        backend,
        parallelism=args.parallelism,
        retry_budget=args.retry_budget,
    )
    out = Path(args.out_dir)
    _write(out / "ai.csv", run.matrix.to_csv())
    _write(out / "audit.jsonl", run.audit_jsonl())
    cost_doc = {
        "prompt_tokens": run.cost.prompt_tokens,
        "completion_tokens": run.cost.completion_tokens,
        "total_tokens": run.cost.total_tokens,
        "transactions": run.cost.transactions,
        "unit_rates": run.cost.unit_rates,
        "estimated_cost": run.cost.estimated_cost,
    }
    _write(out / "cost.json", json.dumps(cost_doc, indent=2, sort_keys=True) + "\n")
    ok = sum(1 for r in run.audit if r.outcome == "ok")
    print(f"graded {ok}/{len(roster) * spec.page_count} pages -> {out}")
    if ok == 0 and len(roster) * spec.page_count > 0:
        return 3
    return 0


def cmd_fit_irt(args) -> int:
    spec = _read_spec(args.spec)
    ai = _read_scores(args.ai, spec, Provenance.AI_RAW)
    config = FitConfig(
        n_quadrature=args.quadrature, tol=args.tol, max_iter=args.max_iter, seed=args.seed
    )
    model = fit_2pl(normalize(ai, spec), config)
    _write(Path(args.out), model.to_json())
    diag = model.diagnostics
    print(
        f"fit {len(model.parts)} parts, {len(model.students)} students: "
        f"{diag.iterations} iterations, converged={diag.converged}, "
        f"degenerate={len(model.degenerate_parts)}"
    )
    return 0


def cmd_filter(args) -> int:
    spec = _read_spec(args.spec)
    ai = _read_scores(args.ai, spec, Provenance.AI_RAW)
    ai_norm = normalize(ai, spec)
    manifests = []
    if args.exclude_types:
        manifests.append(type_filter(spec, _parse_types(args.exclude_types), ai.students))
    if args.threshold is not None:
        manifests.append(partial_credit_filter(ai_norm, PartialCreditFilterConfig(args.threshold)))
    if args.risk is not None:
        if not args.model:
            raise ValidationError("--risk needs --model (fit-irt output)")
        model = IrtModel.from_json(Path(args.model).read_text())
        risks = risk_matrix(ai_norm, expected_scores(model))
        manifests.append(risk_filter(risks, RiskFilterConfig(args.risk)))
    if not manifests:
        raise ValidationError("nothing to filter: give --threshold, --risk, or --exclude-types")
    manifest = compose(manifests)
    _write(Path(args.out), export_review_manifest(manifest, ai, spec))
    counts = manifest.reason_counts()
    print(f"acceptance {manifest.acceptance_fraction:.4f} ({manifest.filter_descriptor})")
    for reason, count in counts.items():
        print(f"  rejected {reason}: {count}")
    return 0


def cmd_metrics(args) -> int:
    spec = _read_spec(args.spec)
    ai = _read_scores(args.ai, spec, Provenance.AI_RAW)
    truth = _read_scores(args.truth, spec, Provenance.GROUND_TRUTH)
    manifest = (
        load_review_manifest(Path(args.manifest).read_text()) if args.manifest else None
    )
    out = Path(args.out_dir)

    lines = ["scope,slope,offset,r_squared,n_points"]
    students, xs, ys = paired_totals(ai, truth, manifest)
    reg = ols_regression(xs, ys)
    lines.append(f"exam,{reg.slope!r},{reg.offset!r},{reg.r_squared!r},{reg.n_points}")
    for problem in sorted({p.split('-', 1)[0] for p in spec.part_ids}, key=int):
        _, px, py = paired_totals(ai, truth, manifest, problem=problem)
        try:
            preg = ols_regression(px, py)
        except UndefinedMetricError:
            lines.append(f"problem-{problem},,,,{len(px)}")
            continue
        lines.append(
            f"problem-{problem},{preg.slope!r},{preg.offset!r},{preg.r_squared!r},{preg.n_points}"
        )
    _write(out / "regression.csv", "\n".join(lines) + "\n")
    _write(out / "scatter.csv", scatter_csv(students, xs, ys))
    _write(out / "by_type.csv", type_quality_csv(quality_by_type(ai, truth, spec, manifest)))

    overall = multiclass_report(ai, truth, manifest)
    doc = {
        "exact_match_accuracy": overall.exact_match_accuracy,
        "macro_accuracy": overall.macro_accuracy,
        "macro_precision": overall.macro_precision,
        "macro_recall": overall.macro_recall,
        "macro_f1": overall.macro_f1,
        "normed_f1": overall.normed_f1,
        "n_classes": overall.n_classes,
        "samples": overall.samples,
        "conventions": "zero-denominator class ratios contribute 0 to macro averages; "
        "table accuracy is the exact-match proportion",
    }
    _write(out / "multiclass.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")

    if args.threshold is not None:
        rep = binary_report(normalize(ai, spec), normalize(truth, spec), args.threshold, manifest)
        _write(
            out / "binary.csv",
            "threshold,tp,fp,fn,tn,accuracy,precision,recall,f1\n"
            f"{rep.threshold!r},{rep.tp},{rep.fp},{rep.fn},{rep.tn},"
            f"{rep.accuracy!r},{rep.precision!r},{rep.recall!r},{rep.f1!r}\n",
        )
    print(f"metrics -> {out} (regression R^2 {reg.r_squared:.4f} over {reg.n_points} students)")
    return 0


def cmd_sweep(args) -> int:
    spec = _read_spec(args.spec)
    ai = _read_scores(args.ai, spec, Provenance.AI_RAW)
    truth = _read_scores(args.truth, spec, Provenance.GROUND_TRUTH)
    thresholds = [float(t) for t in args.thresholds.split(",")]
    model = IrtModel.from_json(Path(args.model).read_text()) if args.model else None
    result = run_sweep(ai, truth, spec, args.kind, thresholds, model)
    _write(Path(args.out), result.to_csv())
    print(f"{args.kind} sweep over {len(thresholds)} thresholds -> {args.out}")
    return 0


def cmd_heatmap(args) -> int:
    spec = _read_spec(args.spec)
    ai = _read_scores(args.ai, spec, Provenance.AI_RAW)
    model = IrtModel.from_json(Path(args.model).read_text())
    risks = risk_matrix(normalize(ai, spec), expected_scores(model))
    _write(Path(args.out), export_risk_heatmap(risks, ai.anomalies))
    print(f"heatmap {len(risks.parts)} parts x {len(risks.students)} students -> {args.out}")
    return 0


def cmd_serve_assets(args) -> int:
    store = AssetStore(args.store_dir, base_url=args.base_url)
    server = build_server(store, args.bind, args.port)
    host, port = server.server_address[:2]
    print(f"serving {len(store)} assets on {host}:{port} (ttl default {args.ttl}s)")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def _env(name: str, default):
    return os.environ.get(f"GRADEKIT_{name}", default)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gradekit", description=__doc__)
    parser.add_argument(
        "--config", help="JSON file of flag defaults (flag names with dashes as underscores)"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic population and mock AI grading")
    p.add_argument("--spec", help="exam spec JSON (defaults to the built-in 46-part exam)")
    p.add_argument("--students", type=int, default=296)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", help="noise profile JSON")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("grade", help="run the page-by-page grading pipeline")
    p.add_argument("--spec", required=True)
    p.add_argument("--backend", choices=["simulated", "openai"], default="simulated")
    p.add_argument("--truth", help="ground-truth CSV (required for the simulated backend)")
    p.add_argument("--roster", help="file of student pseudonyms, one per line")
    p.add_argument("--noise", help="noise profile JSON for the simulated backend")
    p.add_argument("--model", help="model name for the openai backend")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--parallelism", type=int, default=8)
    p.add_argument("--retry-budget", type=int, default=2)
    p.add_argument("--store-dir", help="asset store directory (openai backend)")
    p.add_argument("--pages-dir", help="directory of page PNGs to register")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_grade)

    p = sub.add_parser("fit-irt", help="fit the two-parameter logistic model to AI scores")
    p.add_argument("--spec", required=True)
    p.add_argument("--ai", required=True)
    p.add_argument("--quadrature", type=int, default=41)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--max-iter", type=int, default=500)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_irt)

    p = sub.add_parser("filter", help="compose confidence filters into a review manifest")
    p.add_argument("--spec", required=True)
    p.add_argument("--ai", required=True)
    p.add_argument("--model", help="fitted model JSON (needed with --risk)")
    p.add_argument("--threshold", type=float, help="minimum accepted normalized credit")
    p.add_argument("--risk", type=float, help="maximum tolerated |observed - expected|")
    p.add_argument("--exclude-types", help="comma-separated problem types to reject")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("metrics", help="regression, multiclass, and binary quality reports")
    p.add_argument("--spec", required=True)
    p.add_argument("--ai", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--manifest", help="restrict to a review manifest's accepted cells")
    p.add_argument("--threshold", type=float, help="also emit a binary report at this cutoff")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("sweep", help="threshold sweep table")
    p.add_argument("--spec", required=True)
    p.add_argument("--ai", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--kind", choices=["partial-credit", "risk"], required=True)
    p.add_argument("--thresholds", required=True, help="comma-separated increasing values")
    p.add_argument("--model", help="fitted model JSON (risk sweeps)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("heatmap", help="export the risk matrix, parts x students")
    p.add_argument("--spec", required=True)
    p.add_argument("--ai", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("serve-assets", help="serve page images over ephemeral URLs")
    p.add_argument("--store-dir", default=_env("ASSET_STORE", "assets"))
    p.add_argument("--bind", default=_env("ASSET_BIND", "127.0.0.1"))
    p.add_argument("--port", type=int, default=int(_env("ASSET_PORT", "8640")))
    p.add_argument("--base-url", default=_env("ASSET_BASE_URL", "http://127.0.0.1:8640"))
    p.add_argument("--ttl", type=float, default=float(_env("ASSET_TTL", str(DEFAULT_TTL_SECONDS))))
    p.set_defaults(func=cmd_serve_assets)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> list[str]:
    """Config file values become defaults; explicit flags still win."""
    if "--config" not in argv:
        return argv
    idx = argv.index("--config")
    config = json.loads(Path(argv[idx + 1]).read_text())
    rest = argv[:idx] + argv[idx + 2 :]
    extra: list[str] = []
    for key, value in config.items():
        flag = "--" + key.replace("_", "-")
        if flag in rest:
            continue
        extra.extend([flag, str(value)])
    # insert config-derived flags after the subcommand name
    for i, token in enumerate(rest):
        if not token.startswith("-"):
            return rest[: i + 1] + extra + rest[i + 1 :]
    return rest + extra


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        argv = _apply_config(parser, argv)
        args = parser.parse_args(argv)
        return args.func(args)
    except BackendError as exc:
        print(f"backend failure: {exc}", file=sys.stderr)
        return 3
    except UndefinedMetricError as exc:
        print(f"undefined metric: {exc}", file=sys.stderr)
        return 4
    except (ValidationError, GradekitError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main_entry():
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
