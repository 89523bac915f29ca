import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest
import torch

from handfusion.artifacts import MeanGestureFeature, TrainingPair
from handfusion.dataset import make_toy_dataset
from handfusion.diffusion import ToyBackend, ToyBackendConfig, make_schedule
from handfusion.fusion import FusionConfig, GestureBundle, HashTextEncoder
from handfusion.glyphs import render_glyph


@pytest.fixture(scope="session")
def schedule():
    return make_schedule(1000, "cosine")


@pytest.fixture(scope="session")
def small_backend(schedule):
    return ToyBackend(schedule, ToyBackendConfig(width=8, emb_dim=16, seed=3))


@pytest.fixture(scope="session")
def encoder():
    return HashTextEncoder()


@pytest.fixture
def pairs():
    rng = np.random.default_rng(5)
    out = []
    for i in range(6):
        scene = render_glyph("phone call", 16, rng)
        out.append(TrainingPair(f"p{i:02d}", scene.image, scene.caption() + ", making a phone call hand gesture", "phone call"))
    return out


@pytest.fixture
def bundle():
    mean = MeanGestureFeature("phone call", np.linspace(0.0, 1.0, 16).astype(np.float32), 10)
    return GestureBundle.create(mean, 32, FusionConfig(0.7), seed=0)


@pytest.fixture(scope="session")
def toy_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("toyds")
    make_toy_dataset(root, 40, n_test=16)
    return root


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)


class _Handler(BaseHTTPRequestHandler):
    routes: dict = {}
    calls: list = []

    def do_POST(self):
        body = self.rfile.read(int(self.headers.get("Content-Length", 0)))
        self.calls.append((self.path, self.headers.get("Content-Type"), body))
        fn = self.routes.get(self.path)
        if fn is None:
            self.send_response(404)
            self.end_headers()
            return
        status, reply = fn(body, self.headers.get("Content-Type"))
        data = reply if isinstance(reply, bytes) else json.dumps(reply).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture
def http_service():
    """Local HTTP server; tests register `route(body, content_type) -> (status, reply)`."""
    handler = type("H", (_Handler,), {"routes": {}, "calls": []})
    server = ThreadingHTTPServer(("127.0.0.1", 0), handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    server.url = f"http://127.0.0.1:{server.server_address[1]}"
    server.routes = handler.routes
    server.calls = handler.calls
    yield server
    server.shutdown()
    server.server_close()


def tiny_config(dataset_dir, run_dir, **changes):
    """Seconds-scale run: narrow backend, short pretraining, few epochs and DDIM steps."""
    from handfusion.config import toy_config

    base = {
        "dataset_dir": str(dataset_dir), "run_dir": str(run_dir), "train_size": 8,
        "stage2": {"epochs": 2, "samples_per_epoch": 4},
        "stage3": {"epochs": 2},
        "backend": {"width": 8, "pretrain": {"n_images": 64, "epochs": 1}},
        "eval": {"n_infer_steps": 4, "n_samples": 8, "kid_subset_size": 4, "kid_subsets": 5},
    }
    from handfusion.config import _deep_update

    return toy_config(**_deep_update(base, changes))


@pytest.fixture
def tiny(toy_dataset, tmp_path):
    return lambda **kw: tiny_config(toy_dataset, tmp_path / "runs", **kw)


_ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """`record(criterion, ok, detail)`: prints a PASS/FAIL line, collects it, asserts `ok`."""
    lines = request.config.stash.setdefault(_ACCEPTANCE_KEY, [])

    def record(criterion, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}"
        print(line)
        lines.append(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
