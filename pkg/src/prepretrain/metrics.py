"""Line-delimited metrics records."""

from __future__ import annotations

import json
import math
import os
import time


class MetricsLog:
    """Appends one JSON object per record.

    Wall time is opt-in: leaving it out keeps reruns byte-identical.
    """

    def __init__(self, path=None, run_id: str = "run", seed: int = 0, wall_time: bool = False,
                 append: bool = False):
        self.path = path
        self.run_id = run_id
        self.seed = seed
        self.wall_time = wall_time
        self.append = append
        self.records = []
        self._last_step = {}
        self._t0 = time.perf_counter()
        if path is not None:
            if append and os.path.exists(path):
                self.records = read_metrics(path)
                for r in self.records:
                    self._last_step[r["stage"]] = max(r["step"], self._last_step.get(r["stage"], r["step"]))
            else:
                open(path, "w").close()

    def _rewind(self, stage: str, step: int):
        # a resumed stage replays from ``step``; records past its checkpoint are stale
        self.records = [r for r in self.records if r["stage"] != stage or r["step"] < step]
        steps = [r["step"] for r in self.records if r["stage"] == stage]
        if steps:
            self._last_step[stage] = max(steps)
        else:
            self._last_step.pop(stage, None)
        if self.path is not None:
            with open(self.path, "w") as f:
                for r in self.records:
                    f.write(json.dumps(r, sort_keys=True) + "\n")

    def log(self, stage: str, step: int, **scalars):
        last = self._last_step.get(stage)
        if last is not None and step <= last:
            if not self.append:
                raise ValueError(f"metrics steps must increase within stage {stage!r}: {step} after {last}")
            self._rewind(stage, step)
        self._last_step[stage] = step
        rec = {"run_id": self.run_id, "seed": self.seed, "stage": stage, "step": int(step)}
        if self.wall_time:
            rec["wall_time"] = round(time.perf_counter() - self._t0, 6)
        for k, v in scalars.items():
            v = float(v)
            rec[k] = v if math.isfinite(v) else str(v)
        self.records.append(rec)
        if self.path is not None:
            with open(self.path, "a") as f:
                f.write(json.dumps(rec, sort_keys=True) + "\n")
        return rec

    def stage_logger(self, stage: str) -> "StageLogger":
        return StageLogger(self, stage)


class StageLogger:
    """Callable ``log(step, **scalars)`` bound to one stage of a MetricsLog."""

    def __init__(self, owner: MetricsLog, stage: str):
        self.owner, self.stage = owner, stage

    def __call__(self, step: int, **scalars):
        return self.owner.log(self.stage, step, **scalars)

    def last(self, key: str):
        for r in reversed(self.owner.records):
            if r["stage"] == self.stage and key in r:
                return r[key]
        return None


def read_metrics(path) -> list:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]
