"""Entry point of a data server process (see ServerProcess)."""

import json
import logging
import sys
from multiprocessing.connection import Connection

from .resolvers import ProxyResolver
from .server import DataServer


def _server_main(resolver_fd, control_fd, kwargs):
    logging.basicConfig(level=logging.WARNING)
    control_conn = Connection(control_fd)
    srv = DataServer(("127.0.0.1", 0), ProxyResolver(Connection(resolver_fd)), **kwargs)
    srv.start()
    control_conn.send(("ready", srv.address))
    while True:
        try:
            msg = control_conn.recv()
        except (EOFError, OSError):
            break
        if msg == "metrics":
            control_conn.send(srv.metrics.snapshot())
        elif msg == "stop":
            break
    srv.stop()


if __name__ == "__main__":
    _server_main(int(sys.argv[1]), int(sys.argv[2]), json.loads(sys.argv[3]))
