from __future__ import annotations

import pytest

from webclf.mocknet import MockImageServer


@pytest.fixture(scope="session")
def mock_server():
    server = MockImageServer(port=0).start()
    yield server
    server.stop()
