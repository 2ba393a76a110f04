import random

import pytest

from deer.backend import RetryableBackendError, Script, ScriptedBackend, ScriptToken
from deer.controller import (
    INDUCER_PROMPTS,
    ConfigError,
    ControllerConfig,
    RunAborted,
    RunRecord,
    run_deer,
    run_deer_pro,
    run_parallel_branch,
)
from deer.scriptgen import Scenario, scenario_config, script_gen

from refsim import simulate

LAMBDAS = (0.5, 0.9, 0.95, 0.97, 0.999)
FIELDS = ("transcript", "exit_chunk_index", "exited_early", "reasoning_tokens", "induced_tokens", "conclusion_tokens")


def _run(sc, fn=run_deer, **over):
    with ScriptedBackend([script_gen(sc)]) as b:
        return fn(sc.question_text, scenario_config(sc, **over), b, sc.id)


def random_scenarios(n, seed=0):
    rng = random.Random(seed)
    out = []
    for i in range(n):
        chunks = rng.randint(2, 9)
        pearl = rng.choice([None] + list(range(1, chunks)))
        lam = rng.choice(LAMBDAS[:-1])
        confs = []
        for k in range(1, chunks):
            if pearl is None or k < pearl:
                confs.append(round(rng.uniform(0, lam), 3) if rng.random() > 0.2 else 0.0)
            else:
                confs.append(round(rng.uniform(lam + 1e-3, 1.0), 3))
        out.append(Scenario(chunks=chunks, pearl=pearl, confidences=confs, lam=lam, id=f"r{i}",
                            monitor=rng.choice(["marker", "entropy"]),
                            tokens_per_chunk=rng.randint(2, 8)))
    return out


SUITE = random_scenarios(24)


class TestPaperExample:
    sc = Scenario(chunks=5, pearl=2)

    def test_exits_at_pearl(self):
        r = _run(self.sc, lam=0.95)
        assert r.exited_early and r.exit_chunk_index == 2
        thoughts = r.transcript.split("</think>")[0]
        assert "step2_" in thoughts and "step3_" not in thoughts
        assert r.final_answer == "42"

    def test_high_lambda_matches_vanilla(self):
        r = _run(self.sc, lam=0.999)
        v = _run(self.sc, mode="vanilla")
        assert not r.exited_early and r.transcript == v.transcript
        assert r.reasoning_tokens == v.reasoning_tokens == 37
        assert r.conclusion_tokens == 5
        assert v.induction_attempts == [] and v.induced_tokens == 0

    def test_round_trip_example(self):
        sc = Scenario(chunks=5, pearl=2, confidences=[0.3, 0.99])
        assert _run(sc).exit_chunk_index == 2


@pytest.mark.parametrize("sc", SUITE, ids=[s.id for s in SUITE])
def test_matches_reference(sc):
    for lam in LAMBDAS:
        r = _run(sc, lam=lam)
        ref = simulate(script_gen(sc), lam, strategy=sc.monitor)
        assert {k: getattr(r, k) for k in FIELDS} == {k: ref[k] for k in FIELDS}
        assert [a.decision.score for a in r.induction_attempts] == pytest.approx(ref["attempts"], abs=1e-12)


@pytest.mark.parametrize("sc", SUITE, ids=[s.id for s in SUITE])
def test_prefix_and_lambda_monotone(sc):
    vanilla = _run(sc, mode="vanilla").transcript.split("</think>")[0]
    exits = []
    for lam in LAMBDAS:
        r = _run(sc, lam=lam)
        assert vanilla.startswith(r.transcript.split("</think>")[0])
        exits.append(r.exit_chunk_index or float("inf"))
    assert exits == sorted(exits)


class TestDeerPro:
    def test_spread_blocks_exit(self):
        # mean 0.9, MAD (0.1+0.1+0+0)/4 = 0.05, calibrated 0.85
        sc = Scenario(chunks=3, pearl=None, prompt_confidences=[[1.0, 0.8, 0.9, 0.9], [0.5] * 4])
        r = _run(sc, fn=run_deer_pro)
        cal = r.induction_attempts[0].calibrated
        assert (cal.c_avg, cal.c_mad, cal.c_cali) == pytest.approx((0.9, 0.05, 0.85))
        assert not r.exited_early

    def test_agreement_exits(self):
        sc = Scenario(chunks=4, pearl=2, prompt_confidences=[[0.5] * 4, [0.99, 0.98, 0.99, 0.98], [0.99] * 4])
        r = _run(sc, fn=run_deer_pro)
        assert r.exit_chunk_index == 2
        assert len(r.induction_attempts[-1].trials) == 4
        ref = simulate(script_gen(sc), 0.95, n_prompts=4)
        assert {k: getattr(r, k) for k in FIELDS} == {k: ref[k] for k in FIELDS}

    def test_one_failed_prompt_drags_score(self):
        sc = Scenario(chunks=3, pearl=None, prompt_confidences=[[0.99, 0.99, 0.99, 0.0], [0.5] * 4])
        r = _run(sc, fn=run_deer_pro)
        assert not r.exited_early
        assert r.induction_attempts[0].trials[3].confidence == 0.0


class TestParallel:
    @pytest.mark.parametrize("sc", SUITE[:12], ids=[s.id for s in SUITE[:12]])
    def test_transcripts_identical(self, sc):
        seq, par = _run(sc), _run(sc, fn=run_parallel_branch)
        assert par.transcript == seq.transcript
        assert par.exit_chunk_index == seq.exit_chunk_index
        assert par.reasoning_tokens == seq.reasoning_tokens
        assert par.induced_tokens - par.cancelled_tokens == seq.induced_tokens

    def test_latency_model(self):
        # induction 3 tokens, continuation 5 tokens plus stop, one tick each
        sc = Scenario(chunks=6, pearl=4, tokens_per_chunk=6, tick=1.0)
        seq, par = _run(sc), _run(sc, fn=run_parallel_branch)
        non_exit = [(a, b) for a, b in zip(seq.induction_attempts, par.induction_attempts) if not a.decision.exit]
        assert len(non_exit) == 3
        for a, b in non_exit:
            assert b.latency_ms < a.latency_ms
            assert a.latency_ms == pytest.approx(3000 + 7000)
            assert b.latency_ms == pytest.approx(7000)
        assert par.wall_time_ms < seq.wall_time_ms
        # cancelled after the 3-tick induction: 3 continuation tokens
        assert par.cancelled_tokens == 3

    def test_five_tick_induction_and_continuation(self):
        # continuation after the marker: ",", two body tokens, ". ", stop
        sc = Scenario(chunks=4, pearl=3, tokens_per_chunk=4, tick=1.0)
        script = script_gen(sc)
        for b in script.branches:
            if b.suffix == INDUCER_PROMPTS[0]:
                # pad the trial answer to five tokens: " ", "{", digit, digit, "}"
                conf = b.tokens[1].prob
                b.tokens = [ScriptToken(" ", 1.0), ScriptToken("{", 1.0), ScriptToken("4", conf),
                            ScriptToken("2", 1.0), ScriptToken("}", 1.0)]
        cfg = scenario_config(sc)
        with ScriptedBackend([script]) as b:
            seq = run_deer(sc.question_text, cfg, b)
            par = run_parallel_branch(sc.question_text, cfg, b)
        assert seq.transcript == par.transcript and seq.exit_chunk_index == 3
        for a, p in zip(seq.induction_attempts[:2], par.induction_attempts[:2]):
            assert (a.latency_ms, p.latency_ms) == (10000, 5000)

    def test_exit_cancels_continuation(self):
        sc = Scenario(chunks=3, pearl=1, tick=1.0)
        par = _run(sc, fn=run_parallel_branch)
        assert par.exit_chunk_index == 1
        assert "Wait" not in par.transcript


class TestAccounting:
    def test_budget_exhausted(self):
        r = _run(Scenario(chunks=5, pearl=None), max_total_tokens=10)
        assert r.finish == "budget_exhausted"
        assert r.reasoning_tokens == 10 and r.conclusion_tokens == 0
        assert not r.exited_early

    def test_induced_counted_in_budget(self):
        sc = Scenario(chunks=5, pearl=None)
        a = _run(sc, max_total_tokens=30)
        b = _run(sc, max_total_tokens=30, count_induced_in_budget=True)
        assert b.reasoning_tokens < a.reasoning_tokens

    def test_conclusion_cap(self):
        r = _run(Scenario(chunks=3, pearl=1), conclusion_cap=2)
        assert r.conclusion_tokens == 2 and r.final_answer is None

    def test_record_round_trip(self):
        r = _run(Scenario(chunks=4, pearl=2), mode="deer_pro")
        assert RunRecord.from_json(r.to_json()) == r

    def test_entropy_mode_skips_confident_steps(self):
        sc = Scenario(chunks=4, pearl=3, monitor="entropy")
        r = _run(sc)
        # each chunk holds one low-entropy delimiter that must not trigger
        assert len(r.induction_attempts) == 3
        assert r.exit_chunk_index == 3

    def test_confidence_cap(self):
        sc = Scenario(chunks=3, pearl=1)
        r = _run(sc, confidence_token_cap=1)
        assert r.induction_attempts[0].trials[0].token_max_probs == [0.99]


class TestErrors:
    @pytest.mark.parametrize("kw,key", [(dict(mode="turbo"), "mode"), (dict(lam=1.0), "lambda"),
                                        (dict(n_prompts=9), "n_prompts"), (dict(alpha=-1), "alpha")])
    def test_bad_config_names_key(self, kw, key):
        with pytest.raises(ConfigError, match=key):
            ControllerConfig(**kw).validate()

    def test_backend_failure_aborts_with_partial_record(self):
        b = ScriptedBackend([Script([], error="transport")])
        with pytest.raises(RunAborted) as ei:
            run_deer("q", ControllerConfig(), b)
        assert isinstance(ei.value.cause, RetryableBackendError)
        assert ei.value.record.finish == "error"

    def test_unparseable_trial_never_exits(self):
        sc = Scenario(chunks=3, pearl=None, confidences=[0.0, 0.0])
        r = _run(sc, lam=0.5)
        assert not r.exited_early
        assert all(a.trials[0].answer_text == "" for a in r.induction_attempts)


def test_inducer_prompts_verbatim():
    assert INDUCER_PROMPTS[0] == "\n\n Final Answer\n\\boxed"
    assert len(INDUCER_PROMPTS) == 4
    assert all(p.endswith("\\boxed") for p in INDUCER_PROMPTS)


def test_script_without_marker_runs_to_end():
    s = Script([ScriptToken("x", 0.9), ScriptToken("</think>", 0.9), ScriptToken("\\boxed{3}", 0.9)])
    with ScriptedBackend([s]) as b:
        r = run_deer("q", ControllerConfig(), b)
    assert r.final_answer == "3" and r.induction_attempts == []
