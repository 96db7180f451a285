"""Session-oriented HTTP service exposing the pipeline to the companion UI.

REST endpoints mutate or query per-session state; a WebSocket channel per
session streams typed events ({pose, progress, step, done, error}) in event-
counter order. Wire schemas are documented in docs/wire_protocol.md and are a
compatibility surface for the frontend.
"""

from __future__ import annotations

import math
import queue
import threading
import uuid
from dataclasses import asdict, dataclass, field

import numpy as np
from fastapi import FastAPI, HTTPException, WebSocket, WebSocketDisconnect
from pydantic import BaseModel

from . import program as prog
from .behavior import MPCConfig, build_dataset, run_program, train_behavior_models
from .inference import GoalInference
from .prior import PositionPredictor, build_attribution_prior
from .scenarios import four_area_scene, corridor_scene, predictor_corpus
from .scene import RobotState, load_scene, scene_to_dict
from .simulate import Action, render_topview, step as sim_step, visible_objects
from .traces import TICK_DT, DemoStep, DemoTrace, crop_local, get_crop, label_by_goals, paint_robot
from .xai import AddObject, MoveObject, RemoveObject, counterfactual, explain

API_VERSION = 1

BUILTIN_SCENES = {
    "four-area-open": lambda: four_area_scene("open"),
    "four-area-obstacles": lambda: four_area_scene("obstacles"),
    "corridor-blocked": lambda: corridor_scene(True),
    "corridor-open": lambda: corridor_scene(False),
}


class ServiceError(HTTPException):
    def __init__(self, status, code, message):
        super().__init__(status_code=status, detail={"code": code, "message": message})


@dataclass
class Session:
    session_id: str
    scene: object
    state: RobotState
    event_counter: int = 0
    recording: list = field(default_factory=list)
    recording_crops: list = field(default_factory=list)
    traces: dict = field(default_factory=dict)
    inference: GoalInference | None = None
    prior: object = None
    program: object = None
    library: object = None
    events: "queue.Queue" = field(default_factory=queue.Queue)
    job: threading.Thread | None = None
    job_cancel: threading.Event = field(default_factory=threading.Event)
    lock: threading.Lock = field(default_factory=threading.Lock)
    base_image: object = None

    def emit(self, kind, payload):
        self.event_counter += 1
        event = {"event": kind, "counter": self.event_counter, **payload}
        self.events.put(event)
        return event


class TeleopRequest(BaseModel):
    action: str


class InferRequest(BaseModel):
    trace_ids: list[str]
    n_particles: int = 500
    seed: int = 0
    baseline: bool = False


class TrainRequest(BaseModel):
    trace_ids: list[str]
    epochs: int = 30
    seed: int = 0
    max_samples: int | None = 1500


class SynthesizeRequest(BaseModel):
    edits: list[dict]


class RunRequest(BaseModel):
    seed: int | None = None
    step_budget: int = 1200


class EditModel(BaseModel):
    op: str  # add | remove | move
    object_id: int
    kind: str | None = None
    center: list[float] | None = None
    extent: list[float] | None = None


class CounterfactualRequest(BaseModel):
    edits: list[EditModel]
    transition: list[int] | None = None
    commit: bool = False


def _edit_from_model(m):
    from .scene import Obstacle

    if m.op == "add":
        return AddObject(Obstacle(m.object_id, m.kind or "rect", tuple(m.center), tuple(m.extent)))
    if m.op == "remove":
        return RemoveObject(m.object_id)
    if m.op == "move":
        return MoveObject(m.object_id, tuple(m.center))
    raise ServiceError(422, "bad_edit", f"unknown edit op {m.op!r}")


def create_app():
    app = FastAPI(title="lfdkit service", version=str(API_VERSION))
    sessions: dict[str, Session] = {}

    def get_session(session_id) -> Session:
        if session_id not in sessions:
            raise ServiceError(404, "unknown_session", f"no session {session_id}")
        return sessions[session_id]

    @app.get("/scenes")
    def list_scenes():
        return {"scenes": sorted(BUILTIN_SCENES.keys())}

    @app.post("/sessions")
    def create_session(body: dict):
        name = body.get("scene", "four-area-open")
        if name in BUILTIN_SCENES:
            scene = BUILTIN_SCENES[name]()
        else:
            try:
                scene = load_scene(name)
            except Exception as exc:
                raise ServiceError(422, "bad_scene", f"cannot load scene {name!r}: {exc}")
        session_id = uuid.uuid4().hex[:12]
        sessions[session_id] = Session(
            session_id=session_id,
            scene=scene,
            state=scene.start_pose,
            base_image=render_topview(scene),
        )
        return {
            "session_id": session_id,
            "scene": scene_to_dict(scene),
            "pose": _pose(sessions[session_id]),
        }

    def _pose(session):
        s = session.state
        return {"x": s.x, "y": s.y, "theta": s.theta, "tick": len(session.recording)}

    @app.get("/sessions/{session_id}/state")
    def session_state(session_id: str):
        session = get_session(session_id)
        return {
            "pose": _pose(session),
            "scene": scene_to_dict(session.scene),
            "event_counter": session.event_counter,
            "traces": sorted(session.traces.keys()),
            "recording_steps": len(session.recording),
        }

    @app.post("/sessions/{session_id}/teleop")
    def teleop(session_id: str, body: TeleopRequest):
        session = get_session(session_id)
        try:
            action = Action(body.action)
        except ValueError:
            raise ServiceError(422, "bad_action", f"unknown action {body.action!r}")
        with session.lock:
            tick = len(session.recording)
            state = session.state
            img = paint_robot(session.base_image, session.scene, state)
            crop = crop_local(img, session.scene, state, side=100)
            session.recording_crops.append(
                np.round(crop.values * 255.0).astype(np.uint8)
            )
            new_state, collided = sim_step(session.scene, state, action, TICK_DT)
            session.recording.append(
                {
                    "t": tick * TICK_DT,
                    "state": state,
                    "action": action,
                    "collided": collided,
                }
            )
            session.state = new_state
            event = session.emit("pose", {"pose": _pose(session), "collided": collided})
        return {"pose": _pose(session), "collided": collided, "counter": event["counter"]}

    @app.post("/sessions/{session_id}/stop_recording")
    def stop_recording(session_id: str):
        session = get_session(session_id)
        with session.lock:
            if not session.recording:
                raise ServiceError(422, "empty_recording", "no demonstration input")
            from .traces import finite_difference_velocities

            rec = session.recording
            states = np.array(
                [[r["state"].x, r["state"].y, r["state"].theta] for r in rec]
                + [[session.state.x, session.state.y, session.state.theta]]
            )
            u = finite_difference_velocities(states, TICK_DT)
            steps = [
                DemoStep(
                    t=r["t"],
                    state=r["state"],
                    action=r["action"],
                    u=tuple(u[i]),
                    crop_ref=i,
                    visible=tuple(visible_objects(session.scene, r["state"])),
                )
                for i, r in enumerate(rec)
            ]
            trace = DemoTrace(
                scene_id=session.scene.scene_id,
                steps=steps,
                metadata={"source": "teleop", "session": session_id},
                crops=np.stack(session.recording_crops),
            )
            trace_id = f"trace-{len(session.traces) + 1}"
            session.traces[trace_id] = trace
            session.recording = []
            session.recording_crops = []
            session.emit("done", {"op": "stop_recording", "trace_id": trace_id})
        return {"trace_id": trace_id, "n_steps": len(trace)}

    @app.post("/sessions/{session_id}/infer")
    def infer(session_id: str, body: InferRequest):
        session = get_session(session_id)
        traces = [session.traces[t] for t in body.trace_ids if t in session.traces]
        if not traces:
            raise ServiceError(422, "no_traces", f"unknown trace ids {body.trace_ids}")
        trace = traces[0]
        if body.baseline:
            prior = None
        else:
            predictor = PositionPredictor(seed=body.seed)
            corpus_traces, corpus_scenes = predictor_corpus(session.scene, trace)
            predictor.fit(corpus_traces, corpus_scenes)
            prior = build_attribution_prior(trace, session.scene, predictor)
        gi = GoalInference(n_particles=body.n_particles, seed=body.seed, baseline=body.baseline)
        gi.fit(trace, prior, bounds=session.scene.bounds)
        session.inference = gi
        session.prior = prior
        session.infer_trace_ids = list(body.trace_ids)
        report = gi.report()
        session.emit("done", {"op": "infer", "sequence": report["sequence"]})
        return report

    @app.post("/sessions/{session_id}/induce")
    def induce(session_id: str):
        session = get_session(session_id)
        if session.inference is None or not session.inference.sequence_:
            raise ServiceError(422, "no_inference", "run infer first")
        node = prog.induce(session.inference.sequence_)
        session.program = node
        return {
            "ast": prog.node_to_dict(node),
            "source": prog.render_source(node),
            "sequence": session.inference.sequence_,
        }

    @app.post("/sessions/{session_id}/train")
    def train(session_id: str, body: TrainRequest):
        session = get_session(session_id)
        if session.inference is None:
            raise ServiceError(422, "no_inference", "run infer first")
        if session.job is not None and session.job.is_alive():
            raise ServiceError(409, "busy", "another job is running for this session")
        traces = [session.traces[t] for t in body.trace_ids if t in session.traces]
        if not traces:
            raise ServiceError(422, "no_traces", f"unknown trace ids {body.trace_ids}")
        clusters = session.inference.clusters_
        session.job_cancel.clear()

        def work():
            try:
                labels = [label_by_goals(tr, clusters) for tr in traces]
                scenes = [session.scene] * len(traces)
                datasets = build_dataset(traces, labels, scenes)
                session.emit("progress", {"op": "train", "stage": "datasets",
                                          "transitions": [list(k) for k in sorted(datasets)]})
                centroids = {c.label: c.centroid for c in clusters}
                library = train_behavior_models(
                    datasets, centroids, epochs=body.epochs, seed=body.seed,
                    max_samples=body.max_samples,
                )
                session.library = library
                losses = {
                    f"{a}->{b}": library.get((a, b)).heldout_loss_
                    for a, b in library.transitions()
                }
                session.emit("done", {"op": "train", "losses": losses})
            except Exception as exc:  # surfaced on the stream
                session.emit("error", {"op": "train", "message": str(exc)})

        session.job = threading.Thread(target=work, daemon=True)
        session.job.start()
        return {"status": "training", "transitions": None}

    @app.post("/sessions/{session_id}/synthesize")
    def synthesize_program(session_id: str, body: SynthesizeRequest):
        session = get_session(session_id)
        if session.program is None:
            raise ServiceError(422, "no_program", "induce or load a program first")
        if session.library is None:
            raise ServiceError(422, "no_library", "train behavior models first")
        edits = [prog.EditOp(
            op=e["op"],
            path=tuple(e.get("path", ())),
            node=prog.node_from_dict(e["node"]) if e.get("node") else None,
            count=e.get("count", 0),
        ) for e in body.edits]
        start_goal = session.inference.sequence_[0] if session.inference else 1
        try:
            new_program = prog.synthesize(edits, session.program, start_goal, session.library)
        except prog.SynthesisError as exc:
            return {
                "ok": False,
                "violations": [
                    {"from": v.from_goal, "to": v.to_goal, "context": v.context}
                    for v in exc.violations
                ],
            }
        session.program = new_program
        return {
            "ok": True,
            "ast": prog.node_to_dict(new_program),
            "source": prog.render_source(new_program),
        }

    @app.post("/sessions/{session_id}/run")
    def run(session_id: str, body: RunRequest):
        session = get_session(session_id)
        if session.program is None:
            raise ServiceError(422, "no_program", "induce or synthesize a program first")
        if session.library is None:
            raise ServiceError(422, "no_library", "train behavior models first")
        if session.job is not None and session.job.is_alive():
            raise ServiceError(409, "busy", "another job is running for this session")
        session.job_cancel.clear()

        def work():
            try:
                cfg = MPCConfig(step_budget=body.step_budget)
                record = run_program(
                    session.program, session.library, session.scene,
                    session.scene.start_pose, cfg, seed=body.seed,
                )
                for step_rec in record.steps:
                    if session.job_cancel.is_set():
                        session.emit("error", {"op": "run", "message": "cancelled"})
                        return
                    session.emit("step", step_rec)
                session.emit(
                    "done",
                    {
                        "op": "run",
                        "success": record.success,
                        "collisions": record.collisions,
                        "n_steps": len(record.steps),
                        "failure_reason": record.failure_reason,
                    },
                )
            except Exception as exc:
                session.emit("error", {"op": "run", "message": str(exc)})

        session.job = threading.Thread(target=work, daemon=True)
        session.job.start()
        return {"status": "running"}

    @app.post("/sessions/{session_id}/cancel")
    def cancel(session_id: str):
        session = get_session(session_id)
        session.job_cancel.set()
        return {"status": "cancelling"}

    @app.post("/sessions/{session_id}/explain")
    def explain_endpoint(session_id: str, body: dict | None = None):
        session = get_session(session_id)
        if session.library is None:
            raise ServiceError(422, "no_library", "train behavior models first")
        transition = tuple((body or {}).get("transition") or session.library.transitions()[0])
        model = session.library.get(transition)
        result = explain(model, session.scene, session.state)
        return {
            "waypoints": [list(w) for w in result.waypoints],
            "salient_ids": result.salient_ids,
            "visible_ids": result.visible_ids,
            "final_ids": result.final_ids,
            "heatmap": result.heatmap.values.tolist(),
        }

    @app.post("/sessions/{session_id}/counterfactual")
    def counterfactual_endpoint(session_id: str, body: CounterfactualRequest):
        session = get_session(session_id)
        if session.library is None:
            raise ServiceError(422, "no_library", "train behavior models first")
        transition = tuple(body.transition or session.library.transitions()[0])
        model = session.library.get(transition)
        edits = [_edit_from_model(m) for m in body.edits]
        try:
            result = counterfactual(model, session.scene, session.state, edits)
        except Exception as exc:
            raise ServiceError(422, "bad_edit", str(exc))
        if body.commit:
            session.scene = result.edited_scene
            session.base_image = render_topview(session.scene)
            session.emit("done", {"op": "counterfactual_commit"})
        return {
            "displacement": result.displacement,
            "waypoints": [list(w) for w in result.waypoints],
            "original_waypoints": [list(w) for w in result.original_waypoints],
            "committed": body.commit,
        }

    @app.websocket("/sessions/{session_id}/stream")
    async def stream(websocket: WebSocket, session_id: str):
        await websocket.accept()
        if session_id not in sessions:
            await websocket.close(code=4404)
            return
        session = sessions[session_id]
        import asyncio

        try:
            while True:
                try:
                    event = session.events.get_nowait()
                except queue.Empty:
                    await asyncio.sleep(0.01)
                    continue
                await websocket.send_json(event)
        except (WebSocketDisconnect, RuntimeError):
            return

    app.state.sessions = sessions
    return app


app = create_app()


def main():
    import uvicorn

    uvicorn.run("lfdkit.service:app", host="127.0.0.1", port=8099)


if __name__ == "__main__":
    main()
