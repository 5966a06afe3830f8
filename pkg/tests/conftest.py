import os

for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

import time

import pytest

import notebench.cohort as ch
import notebench.corpus as cp
import notebench.encoder as enc
import notebench.params as pm


@pytest.fixture(scope="session")
def big_corpus():
    """10k-patient corpus with exactly 1733 positives surviving the cohort
    filter (no under-age patients; positives always carry a valid note)."""
    config = cp.GeneratorConfig(
        n_patients=10_000,
        prevalence=0.1733,
        signal_rate=0.9,
        seed=173,
        underage_rate=0.0,
    )
    return config, cp.generate(config)


@pytest.fixture(scope="session")
def separable_run():
    """Default-schedule pretraining, FT, ST, and WEM on the separable corpus.

    Runs once per session; individual acceptance criteria consume the timing,
    the frozen-backbone byte snapshots, and the trained models.
    """
    import notebench.wem as wm

    state = {}
    gen = cp.GeneratorConfig(
        n_patients=400,
        prevalence=0.5,
        signal_rate=1.0,
        seed=11,
        underage_rate=0.0,
        undated_rate=0.0,
    )
    t_start = time.time()
    corpus = cp.generate(gen)
    cohort = ch.build_cohort(corpus)
    bundle = ch.build_balanced(cohort, ch.SplitSpec(seed=11))
    state["bundle"] = bundle

    pre = enc.pretrain_mlm(cohort, schedule=enc.MLM_SCHEDULE, config=enc.EncoderConfig())
    state["pretrain"] = pre

    backbone_before = pm.store_to_bytes(_backbone_only(pre.model))
    st = enc.soft_prompt_tune(
        pre.model, bundle.train, bundle.valid, prompt_len=enc.DEFAULT_PROMPT_LEN,
        schedule=enc.ST_SCHEDULE,
    )
    backbone_after = pm.store_to_bytes(_backbone_only(st.model))
    state["st"] = st
    state["st_steps"] = enc.ST_SCHEDULE.epochs * (
        (sum(len(p.notes) for p in bundle.train) + enc.ST_SCHEDULE.batch_size - 1)
        // enc.ST_SCHEDULE.batch_size
    )
    state["backbone_bytes_before"] = backbone_before
    state["backbone_bytes_after"] = backbone_after

    ft = enc.finetune(pre.model, bundle.train, bundle.valid, schedule=enc.FT_SCHEDULE)
    state["ft"] = ft

    wem_pre = wm.pretrain_embeddings(
        bundle.train + bundle.valid + bundle.test_1 + bundle.test_2,
        schedule=wm.PRETRAIN_SCHEDULE,
    )
    wem_res = wm.train_classifier(
        wem_pre.model, bundle.train, bundle.valid, schedule=wm.CLASSIFIER_SCHEDULE
    )
    state["wem"] = wem_res
    state["elapsed_s"] = time.time() - t_start
    return state


def _backbone_only(model):
    store = pm.ParameterStore()
    for name in model.backbone_names():
        store.add(name, model.store.get(name).data, trainable=False)
    return store


_CRITERION_RESULTS = {}


def pytest_runtest_logreport(report):
    if report.when != "call":
        return
    name = report.nodeid.rsplit("::", 1)[-1]
    if name.startswith("test_criterion_"):
        _CRITERION_RESULTS[name] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _CRITERION_RESULTS:
        return
    terminalreporter.write_line("")
    terminalreporter.write_line("acceptance criteria:")
    for name in sorted(_CRITERION_RESULTS):
        outcome = _CRITERION_RESULTS[name]
        label = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"  [{label}] {name}")
