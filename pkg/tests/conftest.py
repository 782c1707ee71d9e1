import numpy as np
import pytest
import torch

from varspeech.data import SynthCorpusSpec, generate_synth_corpus

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_corpus():
    return generate_synth_corpus(SynthCorpusSpec(num_utterances=12, frames_per_utterance=120, d_x=12,
                                                 prosody_channels=2, num_phone_states=6, seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def gen():
    g = torch.Generator()
    g.manual_seed(1234)
    return g


def nano_config(**overrides):
    from varspeech.config import micro_config

    base = dict(k=6, d_z=2, crop_frames=48, batch_size=8, enc_width=16, enc_blocks=2, utt_widths=(8, 16, 16),
                prior_layers=1, prior_heads=2, prior_width=32, prior_ff=64, prior_token_emb=16, flow_blocks=2,
                flow_hidden=16, dec_width=24, dec_blocks=2, dec_token_emb=8, diffusion_steps=100, ddim_steps=10,
                steps=200, checkpoint_every=50, log_every=10, kmeans_max_iter=50, sample_frac=0.5)
    base.update(overrides)
    return micro_config(**base)


# acceptance summary: one line per criterion, whatever the verbosity

_criteria: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    entry = _criteria.setdefault(number, {"title": title, "passed": True, "ran": False, "details": []})
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        entry["ran"] = True
        if report.outcome != "passed":
            entry["passed"] = False
        for key, value in item.user_properties:
            if key == "detail":
                entry["details"].append(value)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        e = _criteria[number]
        status = "PASS" if e["passed"] and e["ran"] else ("NOT RUN" if not e["ran"] else "FAIL")
        detail = "; ".join(e["details"])
        terminalreporter.write_line(f"criterion {number:2d} {status:4s}  {e['title']}" + (f"  [{detail}]" if detail else ""))
