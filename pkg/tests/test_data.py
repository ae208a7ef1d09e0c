"""Trial parsing, PGM I/O, preprocessing, stacking, and splits."""
import numpy as np
import pytest

from sea.data import (
    TrajectoryStep,
    Trial,
    TrialFormatError,
    make_frame_stack,
    parse_trial,
    preprocess_frame,
    read_pgm,
    serialize_labels,
    split_trials,
    stack_batch,
    write_pgm,
)


def make_trial_dir(tmp_path, rows, n_frames=None, action_set_size=18):
    frames = tmp_path / "frames"
    frames.mkdir(exist_ok=True)
    labels = tmp_path / "labels.csv"
    header = "frame_id,episode,score,action,gaze_xy\n"
    labels.write_text(header + "".join(rows))
    if n_frames is None:
        n_frames = len(rows)
    for row in rows[:n_frames]:
        fid = row.split(",")[0]
        write_pgm(frames / f"{fid}.pgm", np.zeros((8, 8), dtype=np.uint8))
    return labels, frames


class TestPGM:
    def test_round_trip(self, tmp_path):
        img = np.arange(64, dtype=np.uint8).reshape(8, 8)
        write_pgm(tmp_path / "f.pgm", img)
        back, maxval = read_pgm(tmp_path / "f.pgm")
        assert maxval == 255
        np.testing.assert_array_equal(back, img)

    def test_custom_maxval(self, tmp_path):
        img = np.array([[0, 4], [7, 10]], dtype=np.uint8)
        write_pgm(tmp_path / "f.pgm", img, maxval=10)
        back, maxval = read_pgm(tmp_path / "f.pgm")
        assert maxval == 10
        np.testing.assert_array_equal(back, img)

    def test_truncated_rejected(self, tmp_path):
        p = tmp_path / "bad.pgm"
        p.write_bytes(b"P5\n4 4\n255\nxy")
        with pytest.raises(TrialFormatError, match="pixel bytes"):
            read_pgm(p)


class TestParseTrial:
    def test_three_row_file(self, tmp_path):
        rows = [
            "0,0,0.000,3,10.000 20.000\n",
            "1,0,0.000,4,\n",
            "2,0,1.000,0,11.500 21.500 12.000 22.000\n",
        ]
        labels, frames = make_trial_dir(tmp_path, rows)
        trial = parse_trial(labels, frames)
        assert len(trial.steps) == 3
        assert trial.steps[0].gaze_points == [(10.0, 20.0)]
        assert trial.steps[1].gaze_points == []
        assert trial.steps[2].action == 0

    def test_action_out_of_range_names_row(self, tmp_path):
        rows = ["0,0,0.000,99,\n"]
        labels, frames = make_trial_dir(tmp_path, rows)
        with pytest.raises(TrialFormatError, match="row 2"):
            parse_trial(labels, frames, action_set_size=18)

    def test_four_gaze_pairs_round_trip(self, tmp_path):
        gaze = "1.000 2.000 3.500 4.250 5.000 6.000 7.125 8.000"
        rows = [f"0,0,0.000,1,{gaze}\n"]
        labels, frames = make_trial_dir(tmp_path, rows)
        trial = parse_trial(labels, frames)
        assert len(trial.steps[0].gaze_points) == 4
        assert trial.steps[0].gaze_points[1] == (3.5, 4.25)

    def test_non_monotone_frame_id(self, tmp_path):
        rows = ["0,0,0.000,1,\n", "0,0,0.000,1,\n"]
        labels, frames = make_trial_dir(tmp_path, rows)
        with pytest.raises(TrialFormatError, match="not increasing"):
            parse_trial(labels, frames)

    def test_missing_frame_file(self, tmp_path):
        rows = ["0,0,0.000,1,\n", "1,0,0.000,1,\n"]
        labels, frames = make_trial_dir(tmp_path, rows, n_frames=1)
        with pytest.raises(TrialFormatError, match="missing frame"):
            parse_trial(labels, frames)

    def test_bad_header(self, tmp_path):
        (tmp_path / "frames").mkdir()
        labels = tmp_path / "labels.csv"
        labels.write_text("a,b,c\n")
        with pytest.raises(TrialFormatError, match="header"):
            parse_trial(labels, tmp_path / "frames")

    def test_out_of_bounds_gaze_dropped(self, tmp_path):
        rows = ["0,0,0.000,1,5.000 5.000 200.000 5.000\n"]
        labels, frames = make_trial_dir(tmp_path, rows)
        trial = parse_trial(labels, frames, native_resolution=(84, 84))
        assert trial.steps[0].gaze_points == [(5.0, 5.0)]

    def test_parse_serialize_round_trip_bit_exact(self, tmp_path):
        rows = [
            "0,0,0.000,3,10.000 20.000\n",
            "1,0,0.500,4,\n",
            "2,1,2.000,17,1.125 2.250 3.375 4.500\n",
        ]
        labels, frames = make_trial_dir(tmp_path, rows)
        trial = parse_trial(labels, frames)
        assert serialize_labels(trial.steps) == labels.read_text()


class TestPreprocess:
    def test_constant_white(self):
        img = np.full((84, 84), 255, dtype=np.uint8)
        out = preprocess_frame(img)
        np.testing.assert_allclose(out, 1.0, atol=1e-7)

    def test_checkerboard_area_average(self):
        # 2x2 blocks of 0/1 tiling 168x168 -> every 84x84 output cell covers
        # one full block and averages to 0.5.
        tile = np.array([[0.0, 1.0], [1.0, 0.0]])
        img = np.tile(tile, (84, 84))
        out = preprocess_frame(img)
        assert out.shape == (84, 84)
        np.testing.assert_allclose(out, 0.5, atol=1e-7)

    def test_pure_red_luminance(self):
        img = np.zeros((84, 84, 3), dtype=np.uint8)
        img[..., 0] = 255
        out = preprocess_frame(img)
        np.testing.assert_allclose(out, 0.299, atol=1e-6)

    def test_zero_size_rejected(self):
        with pytest.raises(ValueError, match="zero-sized"):
            preprocess_frame(np.zeros((0, 0)))

    def test_same_size_is_identity(self):
        rng = np.random.default_rng(70)
        img = rng.random((84, 84)).astype(np.float32)
        out = preprocess_frame(img)
        np.testing.assert_allclose(out, img, atol=1e-7)

    def test_output_in_unit_interval(self):
        rng = np.random.default_rng(71)
        img = (rng.random((210, 160, 3)) * 255).astype(np.uint8)
        out = preprocess_frame(img)
        assert out.min() >= 0.0 and out.max() <= 1.0
        assert out.shape == (84, 84)


class TestFrameStack:
    def _frames(self, n=6):
        return np.stack([np.full((4, 4), float(i), dtype=np.float32) for i in range(n)])

    def test_first_step_repeats_frame_zero(self):
        st = make_frame_stack(self._frames(), 0)
        assert st.shape == (4, 4, 4)
        np.testing.assert_array_equal(st, np.zeros((4, 4, 4)))

    def test_full_history(self):
        st = make_frame_stack(self._frames(), 3)
        np.testing.assert_array_equal(st[:, 0, 0], [0.0, 1.0, 2.0, 3.0])

    def test_partial_padding(self):
        st = make_frame_stack(self._frames(), 2)
        np.testing.assert_array_equal(st[:, 0, 0], [0.0, 0.0, 1.0, 2.0])

    def test_channel_order_matches_slices(self):
        frames = self._frames()
        st = make_frame_stack(frames, 5)
        for k in range(4):
            np.testing.assert_array_equal(st[k], frames[5 - 3 + k])

    def test_stack_batch_matches_single(self):
        frames = self._frames(10)
        idx = np.array([0, 2, 3, 9])
        batch = stack_batch(frames, idx)
        for row, i in enumerate(idx):
            np.testing.assert_array_equal(batch[row], make_frame_stack(frames, int(i)))


class TestSplit:
    def _trials(self, n):
        return [
            Trial(
                trial_id=f"trial_{i:02d}", subject_id="s", steps=[
                    TrajectoryStep(frame_id=0, episode=0, score=0.0, action=0)
                ],
                native_resolution=(84, 84), action_set_size=3,
            )
            for i in range(n)
        ]

    def test_fifteen_five_disjoint_cover(self):
        trials = self._trials(20)
        train, val = split_trials(trials, 15, 5, seed=3)
        assert len(train) == 15 and len(val) == 5
        ids = {t.trial_id for t in train} | {t.trial_id for t in val}
        assert ids == {t.trial_id for t in trials}
        assert not ({t.trial_id for t in train} & {t.trial_id for t in val})

    def test_same_seed_identical(self):
        trials = self._trials(20)
        a = split_trials(trials, 15, 5, seed=9)
        b = split_trials(trials, 15, 5, seed=9)
        assert [t.trial_id for t in a[0]] == [t.trial_id for t in b[0]]
        assert [t.trial_id for t in a[1]] == [t.trial_id for t in b[1]]

    def test_small_split(self):
        trials = self._trials(4)
        train, val = split_trials(trials, 3, 1, seed=0)
        assert len(train) == 3 and len(val) == 1
        assert not ({t.trial_id for t in train} & {t.trial_id for t in val})

    def test_too_few_trials(self):
        with pytest.raises(ValueError, match="at least"):
            split_trials(self._trials(10), 15, 5, seed=0)
