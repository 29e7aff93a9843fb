import pytest

from echoguide import phantom


@pytest.fixture(scope="session")
def small_trajectory():
    """One 300-frame scan shared by tests that only read it."""
    subject = phantom.sample_subject(7)
    traj = phantom.generate_trajectory(subject, 300, seed=11, image_size=32)
    return traj, subject


@pytest.fixture(scope="session")
def tiny_trajs():
    """Three short 32x32 scans for training-loop tests."""
    subjects = [phantom.sample_subject(200 + i) for i in range(3)]
    return [
        phantom.generate_trajectory(s, 260, seed=31 + i, image_size=32)
        for i, s in enumerate(subjects)
    ]
