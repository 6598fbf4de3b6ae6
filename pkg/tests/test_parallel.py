import os

import pytest

from nbodykam.parallel import THREADS_ENV, parallel_map, thread_count


def test_thread_count_env(monkeypatch):
    monkeypatch.delenv(THREADS_ENV, raising=False)
    assert thread_count() >= 1
    monkeypatch.setenv(THREADS_ENV, "3")
    assert thread_count() == 3


@pytest.mark.parametrize("bad", ["0", "-2", "two"])
def test_thread_count_rejects(monkeypatch, bad):
    monkeypatch.setenv(THREADS_ENV, bad)
    with pytest.raises(ValueError):
        thread_count()


def test_map_preserves_order():
    items = list(range(40))
    out = parallel_map(lambda i: i * i, items, threads=4)
    assert out == [i * i for i in items]


def test_map_results_independent_of_worker_count():
    items = [0.1 * i for i in range(25)]
    ref = parallel_map(lambda x: x**1.5 + 1.0 / (1.0 + x), items, threads=1)
    for threads in (2, 4, 7):
        got = parallel_map(lambda x: x**1.5 + 1.0 / (1.0 + x), items,
                           threads=threads)
        assert got == ref


def test_map_propagates_exceptions():
    def boom(i):
        if i == 3:
            raise RuntimeError("worker failure")
        return i

    with pytest.raises(RuntimeError, match="worker failure"):
        parallel_map(boom, range(8), threads=4)


def test_map_empty():
    assert parallel_map(lambda x: x, [], threads=2) == []


def test_env_drives_default(monkeypatch):
    monkeypatch.setenv(THREADS_ENV, "2")
    assert parallel_map(lambda i: i + 1, [1, 2, 3]) == [2, 3, 4]
    assert os.environ[THREADS_ENV] == "2"
