"""Scenario files: versioned JSON describing the arm, plate, head process,
faults, and the scripted meal. Loading validates eagerly so a malformed
scenario never moves the robot.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .geometry import Pose, quat_from_axis_angle
from .world import (
    ArmModel,
    BiteBehavior,
    FoodItem,
    HeadModel,
    JointState,
    UtensilState,
    WorldState,
    default_arm_model,
)

SCHEMA_VERSION = 1

KNOWN_FOOD_CLASSES = ["grape", "banana-slice", "carrot", "melon", "mashed-potato", "noodles"]

VALID_FAULTS = ("ft_disconnect", "ft_reconnect", "watchdog_kill", "estop")
VALID_ACTIONS = ("move_above_plate", "acquire", "transfer", "stow", "press")


class ScenarioError(ValueError):
    pass


def _require(cond, msg):
    if not cond:
        raise ScenarioError(msg)


def _vec3(value, path):
    try:
        v = np.asarray(value, dtype=float).reshape(3)
    except Exception:
        raise ScenarioError(f"{path}: expected a 3-vector")
    _require(np.all(np.isfinite(v)), f"{path}: components must be finite")
    return v


def validate_scenario(data: dict) -> dict:
    _require(isinstance(data, dict), "scenario must be a JSON object")
    _require(data.get("schema_version") == SCHEMA_VERSION,
             f"schema_version must be {SCHEMA_VERSION}")
    _require(isinstance(data.get("seed"), int), "seed: integer required")

    plate = data.get("plate", [])
    _require(isinstance(plate, list), "plate: list required")
    seen_ids = set()
    for i, item in enumerate(plate):
        p = f"plate[{i}]"
        _require(isinstance(item.get("id"), str) and item["id"], f"{p}.id: string required")
        _require(item["id"] not in seen_ids, f"{p}.id: duplicate {item['id']!r}")
        seen_ids.add(item["id"])
        _vec3(item.get("position"), f"{p}.position")
        _vec3(item.get("size"), f"{p}.size")
        _require(float(item.get("resistance", -1)) >= 0, f"{p}.resistance: must be >= 0")
        for arm, prob in item.get("ground_truth_success", {}).items():
            _require(0.0 <= float(prob) <= 1.0, f"{p}.ground_truth_success[{arm}]: in [0,1]")

    head = data.get("head")
    _require(isinstance(head, dict), "head: object required")
    _vec3(head.get("position"), "head.position")
    for j, s in enumerate(head.get("spasms", [])):
        _require(len(s) == 3, f"head.spasms[{j}]: [time, displacement, decay]")
        _vec3(s[1], f"head.spasms[{j}].displacement")
        _require(float(s[2]) > 0, f"head.spasms[{j}].decay: must be > 0")

    script = data.get("script", [])
    _require(isinstance(script, list), "script: list required")
    for i, step in enumerate(script):
        p = f"script[{i}]"
        _require(isinstance(step, dict), f"{p}: object required")
        if "fault" in step:
            _require(step["fault"] in VALID_FAULTS, f"{p}.fault: unknown {step['fault']!r}")
            _require(isinstance(step.get("at"), (int, float)), f"{p}.at: time required")
        elif "wait" in step:
            _require(float(step["wait"]) > 0, f"{p}.wait: must be > 0")
        elif "action" in step:
            _require(step["action"] in VALID_ACTIONS, f"{p}.action: unknown {step['action']!r}")
            if step["action"] == "press":
                _require(isinstance(step.get("food"), str), f"{p}.food: id required for press")
        else:
            raise ScenarioError(f"{p}: needs one of action|fault|wait")
    return data


def load_scenario(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ScenarioError(f"invalid JSON: {e}") from e
    return validate_scenario(data)


def build_head(head: dict) -> HeadModel:
    yaw = np.deg2rad(float(head.get("yaw_deg", 180.0)))
    base = Pose(position=_vec3(head["position"], "head.position"),
                orientation=quat_from_axis_angle(np.array([0.0, 0.0, 1.0]), yaw))
    voluntary = head.get("voluntary", [])
    amplitudes = np.array([_vec3(v["amplitude"], "head.voluntary.amplitude")
                           for v in voluntary]).reshape(-1, 3)
    bite = head.get("bite")
    return HeadModel(
        base_pose=base,
        voluntary_amplitudes=amplitudes,
        voluntary_frequencies=np.array([float(v["frequency"]) for v in voluntary]),
        voluntary_phases=np.array([float(v.get("phase", 0.0)) for v in voluntary]),
        spasm_schedule=[(float(t), _vec3(d, "spasm"), float(k))
                        for t, d, k in head.get("spasms", [])],
        noise_std=float(head.get("noise_std", 0.0)),
        talking_intervals=[tuple(map(float, iv)) for iv in head.get("talking", [])],
        mouth_closed_intervals=[tuple(map(float, iv)) for iv in head.get("mouth_closed", [])],
        bite=BiteBehavior(**bite) if bite else BiteBehavior(),
    )


def build_world(data: dict) -> WorldState:
    """WorldState from a validated scenario dict."""
    arm_model = default_arm_model()
    plate = []
    for item in data.get("plate", []):
        plate.append(FoodItem(
            id=item["id"],
            food_class=item.get("food_class", "grape"),
            pose=Pose(position=_vec3(item["position"], "position")),
            major_axis=np.asarray(item.get("major_axis", [1.0, 0.0, 0.0]), dtype=float),
            size=_vec3(item["size"], "size"),
            resistance=float(item["resistance"]),
            ground_truth_success={int(k): float(v)
                                  for k, v in item.get("ground_truth_success", {}).items()},
        ))
    utensil = UtensilState(
        breakaway_threshold=float(data.get("utensil", {}).get("breakaway_threshold", 15.0)))
    initial_q = np.asarray(data.get("initial_q", np.zeros(6)), dtype=float)
    w = WorldState(
        arm_model=arm_model,
        arm=JointState(initial_q),
        plate=plate,
        head=build_head(data["head"]),
        utensil=utensil,
        rng_seed=int(data["seed"]),
        plate_center=_vec3(data.get("plate_center", [0.38, 0.0, 0.0]), "plate_center"),
        plate_radius=float(data.get("plate_radius", 0.11)),
    )
    return w


def nominal_meal_scenario(bites: int = 3, seed: int = 42, noise_std: float = 0.0) -> dict:
    """The reference 3-bite meal: reliable foods, cooperative head, no faults."""
    foods = []
    positions = [[0.36, 0.05, 0.012], [0.40, -0.05, 0.012], [0.35, -0.03, 0.012],
                 [0.42, 0.04, 0.012], [0.38, 0.0, 0.012]]
    for i in range(bites):
        foods.append({
            "id": f"grape-{i + 1}",
            "food_class": "grape",
            "position": positions[i % len(positions)],
            "major_axis": [1.0, 0.0, 0.0],
            "size": [0.024, 0.024, 0.022],
            "resistance": 120.0,
            "ground_truth_success": {str(a): 1.0 for a in range(11)},
        })
    script = [{"action": "move_above_plate"}]
    for _ in range(bites):
        script.append({"action": "acquire", "food": "auto", "tries": 3})
        script.append({"action": "transfer"})
    script.append({"action": "stow"})
    return {
        "schema_version": SCHEMA_VERSION,
        "name": f"nominal-{bites}-bite-meal",
        "seed": seed,
        "plate_center": [0.38, 0.0, 0.0],
        "plate_radius": 0.11,
        "plate": foods,
        "head": {
            "position": [0.62, 0.0, 0.33],
            "yaw_deg": 180.0,
            "voluntary": [],
            "spasms": [],
            "noise_std": noise_std,
            "talking": [],
            "mouth_closed": [],
            "bite": {"dwell_s": 0.5, "force_n": 2.0, "press_s": 0.15},
        },
        "utensil": {"breakaway_threshold": 15.0},
        "script": script,
    }
