from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from pacerag.cohort import SplitSpec, split_cohort
from pacerag.pipeline import PipelineConfig, Runtime, iter_targets, treatrag_candidates
from pacerag.retrieval import DenseIndex, HashingEmbedder, build_pool_entries, chunk_guidelines, guideline_entries
from pacerag.scripted import ScriptedBackend, build_script_table
from pacerag.synth import default_synth_config, generate_synthetic_cohort, synthetic_guidelines


@pytest.fixture(scope="session")
def synth_config():
    return default_synth_config(n_patients=60)


@pytest.fixture(scope="session")
def synth_world(synth_config):
    cohort, oracle = generate_synthetic_cohort(synth_config, 11)
    pool, test = split_cohort(cohort, SplitSpec("ratio", 0.75, 3))
    return cohort, oracle, pool, test


@pytest.fixture(scope="session")
def embedder():
    return HashingEmbedder(128, 0)


@pytest.fixture
def runtime(synth_config, synth_world, embedder):
    cohort, _, pool, test = synth_world
    pool_index = DenseIndex.build(build_pool_entries(pool, "latest", "sentence"), embedder)
    gidx = DenseIndex.build(guideline_entries(chunk_guidelines(synthetic_guidelines(synth_config))), embedder)
    return Runtime(
        backend=ScriptedBackend(build_script_table(synth_config, noise=0.0)),
        config=PipelineConfig(),
        pool_index=pool_index,
        guideline_index=gidx,
        treatrag_cases=treatrag_candidates(pool),
        test_ids=frozenset(test.patient_ids),
        vocabulary=frozenset(cohort.drug_vocabulary()),
    )


@pytest.fixture
def contexts(synth_world):
    return iter_targets(synth_world[3])


class _Capture:
    def __init__(self):
        self.requests: list[dict] = []
        self.responses: list[tuple[int, dict | str]] = []
        self.default: tuple[int, dict | str] = (200, {"choices": [{"message": {"content": "ok"}}]})


@pytest.fixture
def http_stub():
    """A local HTTP server that records JSON request bodies and replays queued responses."""
    capture = _Capture()

    class Handler(BaseHTTPRequestHandler):
        def log_message(self, *args):
            pass

        def _reply(self):
            status, body = capture.responses.pop(0) if capture.responses else capture.default
            data = body if isinstance(body, str) else json.dumps(body)
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.end_headers()
            self.wfile.write(data.encode())

        def do_POST(self):
            length = int(self.headers.get("Content-Length", 0))
            body = json.loads(self.rfile.read(length) or b"{}")
            capture.requests.append({"path": self.path, "body": body, "headers": dict(self.headers)})
            self._reply()

        def do_GET(self):
            capture.requests.append({"path": self.path, "body": None, "headers": dict(self.headers)})
            self._reply()

    server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    capture.url = f"http://127.0.0.1:{server.server_address[1]}"
    yield capture
    server.shutdown()
    server.server_close()


# ---------------------------------------------------------------------------
# Acceptance summary: one pass/fail line per criterion at the end of the run.

_CRITERIA: dict[int, tuple[str, str, str]] = {}



def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if call.when == "setup" and call.excinfo is None:
        return
    if call.when == "teardown" and (call.excinfo is None or number in _CRITERIA):
        return
    if call.excinfo is None:
        outcome, detail = "PASS", ""
    elif call.excinfo.errisinstance(pytest.skip.Exception):
        outcome, detail = "SKIP", str(call.excinfo.value)
    else:
        outcome, detail = "FAIL", call.excinfo.exconly().splitlines()[0][:160]
    _CRITERIA[number] = (title, outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, outcome, detail = _CRITERIA[number]
        line = f"criterion {number:>2} {outcome:<4} {title}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))
