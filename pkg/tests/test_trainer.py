import numpy as np
import pytest

from vmtlab import trainer
from vmtlab.config import ExperimentConfig
from vmtlab.losses import LossTermMask


def tiny(iters=30, **loss):
    cfg = (ExperimentConfig()
           .update("data", n=200)
           .update("model", hidden=16)
           .update("train", iterations=iters, batch_size=16, eval_interval=10)
           .update("eval", probe_pairs=20, probe_lambdas=5))
    return cfg.update("loss", **loss) if loss else cfg


def _same_params(a, b):
    return all(np.array_equal(a.values[k], b.values[k]) and np.array_equal(a.shadow[k], b.shadow[k])
               for k in a.values)


class TestTrainLoop:
    def test_deterministic(self):
        a, b = trainer.train_vmt(tiny()), trainer.train_vmt(tiny())
        assert _same_params(a.params, b.params)
        assert [r.components for r in a.history] == [r.components for r in b.history]

    def test_history_and_status(self):
        st = trainer.train_vmt(tiny())
        assert [r.iteration for r in st.history] == [10, 20, 30]
        assert st.status in ("completed", "degenerate")
        assert st.params.adam_t == {"encoder_g": 30, "head_h": 30, "discriminator_d": 30}

    def test_source_only_skips_discriminator(self):
        st = trainer.train_vmt(trainer.source_only(tiny()))
        init = trainer.init_state(tiny())
        assert st.params.adam_t["discriminator_d"] == 0
        assert np.array_equal(st.params.values["d.W0"], init.params.values["d.W0"])

    def test_group_isolation_checked(self):
        st = trainer.train_vmt(tiny(iters=5).update("train", check_groups=True))
        assert st.iteration == 5

    def test_resume_is_bitwise(self, tmp_path):
        cfg = tiny()
        full = trainer.train_vmt(cfg)
        part = trainer.train_vmt(cfg, stop_at=17)
        assert part.status == "running"
        part.save(tmp_path / "mid.npz", cfg)
        loaded, meta = trainer.TrainState.load(tmp_path / "mid.npz")
        assert meta["config_hash"] == cfg.hash()
        resumed = trainer.train_vmt(cfg, state=loaded)
        assert _same_params(full.params, resumed.params)
        assert [r.target_acc for r in full.history] == [r.target_acc for r in resumed.history]

    def test_zero_iterations_records_init(self):
        st = trainer.train_vmt(tiny(iters=0))
        assert len(st.history) == 1 and st.history[0].iteration == 0

    def test_divergence_names_component(self):
        cfg = tiny(iters=5).update("optim", lr=1e200)
        with pytest.raises(trainer.TrainingDiverged) as info:
            trainer.train_vmt(cfg)
        assert info.value.iteration >= 1
        assert info.value.component


class TestRefine:
    def test_zero_iterations_keeps_accuracy(self):
        cfg = tiny()
        st = trainer.train_vmt(cfg)
        ref = trainer.refine_dirt_t(st, cfg.update("refine", iterations=0))
        assert ref.history[0].target_acc == st.history[-1].target_acc

    def test_huge_beta_pins_student_to_teacher(self):
        from vmtlab import evaluation as ev
        from vmtlab import losses
        from vmtlab.data import make_task

        cfg = tiny()
        st = trainer.train_vmt(cfg)
        rcfg = cfg.update("loss", beta=1e6).update("refine", iterations=20, interval=1000, eval_interval=20)
        ref = trainer.refine_dirt_t(st, rcfg)
        task = make_task(cfg.data)
        p_t = ev.predict(st.params.eval_model(), task.target_test.inputs)
        p_s = ev.predict(ref.params.eval_model(), task.target_test.inputs)
        assert losses.kl_divergence(p_t, p_s).item() < 1e-3

    def test_architecture_mismatch(self):
        from vmtlab.nn import ArchitectureError

        st = trainer.train_vmt(tiny(iters=2))
        with pytest.raises(ArchitectureError, match="does not match"):
            trainer.refine_dirt_t(st, tiny().update("model", hidden=8))


class TestAggregation:
    def test_sweep_summary(self):
        results, s = trainer.seed_sweep(tiny(iters=10), [1, 0])
        assert [r.seed for r in results] == [1, 0]
        accs = np.array(sorted([r.target_acc for r in results]))
        assert s.n_completed == 2 and s.n_failed == 0
        assert s.mean == pytest.approx(accs.mean()) and s.std == pytest.approx(accs.std())

    def test_duplicate_seeds_rejected(self):
        with pytest.raises(ValueError, match="distinct"):
            trainer.seed_sweep(tiny(), [0, 0])

    def test_failures_recorded(self):
        results = [trainer.RunResult(0, "completed", target_acc=80.0), trainer.RunResult(1, "failed", error="x")]
        s = trainer.summarize(results)
        assert (s.mean, s.n_completed, s.n_failed) == (80.0, 1, 1)

    def test_ablation_single_row(self):
        rows = trainer.run_ablation(tiny(iters=10), [LossTermMask.parse("Lc")], seeds=[0, 1])
        assert len(rows) == 1 and rows[0].label == "{L_c}"
        assert rows[0].spread >= 0
        assert np.isfinite(rows[0].median)
