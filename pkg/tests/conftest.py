import re
import time

import numpy as np
import pytest

from coopweight import harness, nn
from coopweight.config import RunConfig

# criterion id -> (passed, detail), filled by the acceptance tests
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    def record(key: str, passed: bool, detail: str = "") -> None:
        ACCEPTANCE[key] = (bool(passed), detail)
        print(f"[{'PASS' if passed else 'FAIL'}] criterion {key}: {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(re.match(r"\d+", k).group()), k)):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {key}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class TrainedRun:
    """Schemes 1-3 trained once at the default desk-scale sizes."""

    def __init__(self, root):
        self.root = root
        self.cfg = RunConfig(seed=0, output_dir=str(root))
        self.timings: dict[str, float] = {}
        self.losses: dict[int, list[float]] = {1: [], 2: [], 3: []}
        self.w_log: list[tuple] = []

        t = time.perf_counter()
        cfg1 = RunConfig(**{**vars(self.cfg), "scheme": 1})
        self.scheme1 = harness.run_scheme1(cfg1, on_epoch=lambda e, loss: self.losses[1].append(loss))
        self.timings["scheme1"] = time.perf_counter() - t

        t = time.perf_counter()
        cfg2 = RunConfig(**{**vars(self.cfg), "scheme": 2})
        self.scheme2 = harness.run_scheme2(cfg2, on_epoch=lambda e, loss: self.losses[2].append(loss))
        self.timings["scheme2"] = time.perf_counter() - t
        self.ckpt2 = root / "backbone_scheme2.ckpt"
        nn.save_checkpoint(self.ckpt2, self.scheme2.store.state())
        self.ckpt2_bytes = self.ckpt2.read_bytes()
        self.checksum_before = harness.load_backbone(cfg2, self.ckpt2).store.checksum()

        t = time.perf_counter()
        cfg3 = RunConfig(**{**vars(self.cfg), "scheme": 3, "backbone_checkpoint": str(self.ckpt2)})

        def log_w(*row):
            self.w_log.append(row)
            self.losses[3].append(row[1])

        self.backbone3, self.weighting = harness.run_scheme3(cfg3, on_epoch=log_w)
        self.timings["scheme3"] = time.perf_counter() - t

        t = time.perf_counter()
        scenes = harness.test_scenes(self.cfg)
        self.ev2 = harness.Evaluator(self.backbone3, scenes, seed=0, draws=self.cfg.eval_draws,
                                     weighting=self.weighting, scheme=2)
        self.ev1 = harness.Evaluator(self.scheme1, scenes, seed=0, draws=self.cfg.eval_draws, scheme=1)
        self.timings["eval"] = time.perf_counter() - t
        self._memo: dict = {}

    def evaluate(self, point, mode, scheme=2):
        key = (point, mode, scheme)
        if key not in self._memo:
            t = time.perf_counter()
            ev = self.ev1 if scheme == 1 else self.ev2
            self._memo[key] = ev.evaluate(point, mode)
            self.timings["eval"] += time.perf_counter() - t
        return self._memo[key]

    def ap(self, point, mode, scheme=2):
        return self.evaluate(point, mode, scheme).ap_03

    @property
    def total_time(self) -> float:
        return sum(self.timings.values())


@pytest.fixture(scope="session")
def trained(tmp_path_factory):
    return TrainedRun(tmp_path_factory.mktemp("trained"))
