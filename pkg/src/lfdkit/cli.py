"""Batch pipeline automation.

Subcommands cover scripted demo generation, inference, program induction,
behavior training, autonomous runs, explanations, the baseline comparison,
and full reproduction of the acceptance suite. Exit codes: 0 ok,
2 validation failure, 3 training divergence, 4 I/O or schema error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_DIVERGENCE = 3
EXIT_IO = 4


def _out_root(args):
    root = args.out or os.environ.get("LFDKIT_OUT", "out")
    os.makedirs(root, exist_ok=True)
    return root


def cmd_demo(args):
    from . import traces as tr
    from .scene import save_scene
    from .scenarios import corridor_demo, fig2_demo, scenario_demo, synthetic_controller_trace

    out = _out_root(args)
    made = []
    if args.policy in ("fig2", "a", "b", "c"):
        if args.policy == "fig2":
            scene, trace = fig2_demo(args.layout, cycles=args.cycles)
        else:
            scene, trace = scenario_demo(args.policy)
    elif args.policy == "corridor":
        scene, trace = corridor_demo(blocked=not args.unblocked, standoff=args.standoff)
    elif args.policy == "synthetic":
        trace, truth = synthetic_controller_trace(args.seed)
        scene = None
        truth_path = os.path.join(out, f"{args.name}.truth.json")
        with open(truth_path, "w") as fh:
            json.dump(
                [
                    {"goal": list(t.goal), "gains": list(t.gains), "step_range": list(t.step_range)}
                    for t in truth
                ],
                fh,
                indent=2,
            )
        made.append(truth_path)
    else:
        print(f"unknown policy {args.policy!r}", file=sys.stderr)
        return EXIT_VALIDATION
    trace_path = os.path.join(out, f"{args.name}.trace.jsonl")
    tr.save(trace, trace_path)
    made.append(trace_path)
    if scene is not None:
        scene_path = os.path.join(out, f"{args.name}.scene.yaml")
        save_scene(scene, scene_path)
        made.append(scene_path)
    print(json.dumps({"written": made}))
    return EXIT_OK


def _load_traces(paths):
    from . import traces as tr

    return [tr.load(p) for p in paths]


def cmd_infer(args):
    from . import traces as tr
    from .inference import GoalInference, save_report
    from .prior import PositionPredictor, build_attribution_prior
    from .scenarios import predictor_corpus
    from .scene import load_scene

    out = _out_root(args)
    scene = load_scene(args.scene)
    traces = _load_traces(args.traces)
    trace = traces[0]
    if args.no_prior:
        prior = None
    else:
        predictor = PositionPredictor(seed=args.seed)
        if args.augment_geometry and scene.scene_id.startswith("four-area"):
            corpus_traces, corpus_scenes = predictor_corpus(scene, trace)
            corpus_traces += traces[1:]
            corpus_scenes += [scene] * (len(traces) - 1)
        else:
            corpus_traces, corpus_scenes = traces, [scene] * len(traces)
        predictor.fit(corpus_traces, corpus_scenes)
        prior = build_attribution_prior(trace, scene, predictor)
    gi = GoalInference(n_particles=args.n_particles, seed=args.seed, baseline=args.no_prior)
    gi.fit(trace, prior, bounds=scene.bounds)
    report = gi.report()
    report["scene_id"] = scene.scene_id
    path = os.path.join(out, args.report_name)
    save_report(report, path)
    print(json.dumps({"written": [path], "sequence": report["sequence"]}))
    return EXIT_OK


def cmd_induce(args):
    from . import program as prog
    from .inference import load_report

    out = _out_root(args)
    report = load_report(args.report)
    if not report["sequence"]:
        print("report contains no visiting-goal sequence", file=sys.stderr)
        return EXIT_VALIDATION
    node = prog.induce(report["sequence"])
    ast_path = os.path.join(out, "program.json")
    src_path = os.path.join(out, "program.py")
    prog.save_program(node, ast_path)
    with open(src_path, "w") as fh:
        fh.write(prog.render_source(node))
    print(json.dumps({"written": [ast_path, src_path]}))
    return EXIT_OK


def cmd_train(args):
    from .behavior import build_dataset, train_behavior_models
    from .inference import load_report
    from .nnet import TrainingDiverged
    from .scene import load_scene
    from .traces import label_by_goals
    from .inference import GoalCluster

    out = _out_root(args)
    scene = load_scene(args.scene)
    traces = _load_traces(args.traces)
    report = load_report(args.labels_from)
    clusters = [
        GoalCluster(c["cluster_id"], c["label"], tuple(c["centroid"]), tuple(c["members"]))
        for c in report["clusters"]
    ]
    labels = [label_by_goals(t, clusters) for t in traces]
    datasets = build_dataset(traces, labels, [scene] * len(traces))
    centroids = {c.label: c.centroid for c in clusters}
    try:
        library = train_behavior_models(
            datasets, centroids, epochs=args.epochs, seed=args.seed, max_samples=args.max_samples
        )
    except TrainingDiverged as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_DIVERGENCE
    lib_dir = os.path.join(out, args.library_name)
    library.save(lib_dir)
    losses = {f"{a}->{b}": library.get((a, b)).heldout_loss_ for a, b in library.transitions()}
    print(json.dumps({"library": lib_dir, "heldout_losses": losses}))
    return EXIT_OK


def cmd_run(args):
    from . import program as prog
    from .behavior import ControllerLibrary, MPCConfig, run_program
    from .scene import load_scene

    out = _out_root(args)
    scene = load_scene(args.scene)
    library = ControllerLibrary.load(args.library)
    node = prog.load_program(args.program)
    start_goal = args.start_goal
    violations = prog.validate(node, start_goal, library)
    if violations:
        for v in violations:
            print(str(v), file=sys.stderr)
        return EXIT_VALIDATION
    record = run_program(
        node, library, scene, scene.start_pose,
        MPCConfig(step_budget=args.step_budget), start_goal=start_goal, seed=args.seed,
    )
    rec_path = os.path.join(out, "execution.jsonl")
    record.save(rec_path)
    summary = {
        "success": record.success,
        "steps": len(record.steps),
        "collisions": record.collisions,
        "failure_reason": record.failure_reason,
    }
    print(json.dumps({"written": [rec_path], **summary}))
    return EXIT_OK


def cmd_explain(args):
    from .behavior import ControllerLibrary
    from .scene import RobotState, load_scene
    from .xai import explain

    out = _out_root(args)
    scene = load_scene(args.scene)
    library = ControllerLibrary.load(args.library)
    transition = tuple(args.transition) if args.transition else library.transitions()[0]
    model = library.get(transition)
    state = scene.start_pose
    if args.pose:
        x, y, theta = (float(v) for v in args.pose.split(","))
        state = RobotState(x, y, theta)
    result = explain(model, scene, state)
    heat_path = os.path.join(out, "heatmap.pgm")
    result.heatmap.export_pgm(heat_path)
    exp_path = os.path.join(out, "explanation.json")
    with open(exp_path, "w") as fh:
        json.dump(
            {
                "waypoints": [list(w) for w in result.waypoints],
                "salient_ids": result.salient_ids,
                "visible_ids": result.visible_ids,
                "final_ids": result.final_ids,
            },
            fh,
            indent=2,
        )
    print(json.dumps({"written": [heat_path, exp_path], "final_ids": result.final_ids}))
    return EXIT_OK


def cmd_counterfactual(args):
    from .behavior import ControllerLibrary
    from .scene import Obstacle, RobotState, load_scene
    from .xai import AddObject, EditError, MoveObject, RemoveObject, counterfactual

    out = _out_root(args)
    scene = load_scene(args.scene)
    library = ControllerLibrary.load(args.library)
    transition = tuple(args.transition) if args.transition else library.transitions()[0]
    model = library.get(transition)
    state = scene.start_pose
    if args.pose:
        x, y, theta = (float(v) for v in args.pose.split(","))
        state = RobotState(x, y, theta)
    with open(args.edits) as fh:
        edit_specs = json.load(fh)
    edits = []
    for e in edit_specs:
        if e["op"] == "add":
            edits.append(AddObject(Obstacle(e["object_id"], e.get("kind", "rect"),
                                            tuple(e["center"]), tuple(e["extent"]))))
        elif e["op"] == "remove":
            edits.append(RemoveObject(e["object_id"]))
        elif e["op"] == "move":
            edits.append(MoveObject(e["object_id"], tuple(e["center"])))
        else:
            print(f"unknown edit op {e['op']!r}", file=sys.stderr)
            return EXIT_VALIDATION
    try:
        result = counterfactual(model, scene, state, edits)
    except EditError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_VALIDATION
    path = os.path.join(out, "counterfactual.json")
    with open(path, "w") as fh:
        json.dump(
            {
                "displacement": result.displacement,
                "waypoints": [list(w) for w in result.waypoints],
                "original_waypoints": [list(w) for w in result.original_waypoints],
            },
            fh,
            indent=2,
        )
    print(json.dumps({"written": [path], "displacement": result.displacement}))
    return EXIT_OK


def cmd_compare(args):
    from .acceptance import baseline_comparison

    out = _out_root(args)
    table = baseline_comparison(seeds=range(args.n_seeds), verbose=True)
    path = os.path.join(out, "comparison.json")
    with open(path, "w") as fh:
        json.dump(table, fh, indent=2)
    print(json.dumps({"written": [path], "summary": table["summary"]}))
    return EXIT_OK


def cmd_reproduce_all(args):
    from .acceptance import run_all

    out = _out_root(args)
    results = run_all(out_dir=out, criteria=args.criteria)
    ok = all(r["passed"] for r in results)
    return EXIT_OK if ok else EXIT_VALIDATION


def cmd_serve(args):
    import uvicorn

    uvicorn.run("lfdkit.service:app", host=args.host, port=args.port)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="lfdkit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("demo", help="generate a scripted demonstration trace")
    p.add_argument("--policy", default="fig2",
                   choices=["fig2", "a", "b", "c", "corridor", "synthetic"])
    p.add_argument("--layout", default="open")
    p.add_argument("--cycles", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--standoff", type=float, default=0.6)
    p.add_argument("--unblocked", action="store_true")
    p.add_argument("--name", default="demo")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_demo)

    p = sub.add_parser("infer", help="run goal inference over traces")
    p.add_argument("--traces", nargs="+", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--no-prior", action="store_true", help="baseline mode: uniform goal proposals")
    p.add_argument("--n-particles", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--augment-geometry", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--report-name", default="report.json")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("induce", help="compress a report's goal sequence into a program")
    p.add_argument("--report", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_induce)

    p = sub.add_parser("train", help="train per-transition behavior models")
    p.add_argument("--traces", nargs="+", required=True)
    p.add_argument("--labels-from", required=True, help="inference report supplying goal clusters")
    p.add_argument("--scene", required=True)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-samples", type=int, default=1500)
    p.add_argument("--library-name", default="library")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("run", help="execute a program autonomously with MPC")
    p.add_argument("--program", required=True)
    p.add_argument("--library", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--start-goal", type=int, default=1)
    p.add_argument("--step-budget", type=int, default=1200)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("explain", help="occlusion explanation at a pose")
    p.add_argument("--library", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--transition", type=int, nargs=2, default=None)
    p.add_argument("--pose", default=None, help="x,y,theta")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("counterfactual", help="what-if scene edits with re-prediction")
    p.add_argument("--library", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--edits", required=True, help="JSON edit list")
    p.add_argument("--transition", type=int, nargs=2, default=None)
    p.add_argument("--pose", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_counterfactual)

    p = sub.add_parser("compare", help="extended-vs-baseline comparison table")
    p.add_argument("--n-seeds", type=int, default=10)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("reproduce-all", help="run the full acceptance suite")
    p.add_argument("--criteria", type=int, nargs="*", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_reproduce_all)

    p = sub.add_parser("serve", help="start the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8099)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
