"""A local model server speaking the scorer's HTTP protocol, backed by a MockScorer."""

import json
import math
import threading
from contextlib import contextmanager
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from relforge.scorer import ContextLengthExceeded


class _Handler(BaseHTTPRequestHandler):
    def log_message(self, *args):
        pass

    def _reply(self, status, payload):
        body = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_POST(self):
        server = self.server
        req = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        with server.lock:
            server.requests.append((self.path, req))
        reject = server.reject
        if reject is not None and reject(self.path, req):
            self._reply(413, {"error": "context length exceeded"})
            return
        if server.fail_status:
            self._reply(server.fail_status, {"error": "boom"})
            return
        m = server.mock
        try:
            if self.path == "/v1/next_token":
                dist = m.next_token_distribution(req["text"])
                toks = [{"token": t, "logprob": math.log(p) if p > 0 else -1e30} for t, p in dist.entries.items()]
                out = {"tokens": toks[: req["top_k"]]}
            elif self.path == "/v1/logprob":
                out = {"logprob": m.continuation_logprob(req["text"], req["continuation"])}
            elif self.path == "/v1/embed":
                e = m.embed_last_token(req["text"]).values.tolist()
                out = {"embedding": e, "dim": len(e)}
            else:
                self._reply(404, {"error": "unknown path"})
                return
        except ContextLengthExceeded:
            self._reply(413, {"error": "context length exceeded"})
            return
        out["id"] = req.get("id") if server.echo_id else -1
        self._reply(200, out)


@contextmanager
def serve(mock, reject=None, fail_status=None, echo_id=True):
    """Run a stub server on an ephemeral port; yields it with ``.url`` and ``.requests``."""
    srv = ThreadingHTTPServer(("127.0.0.1", 0), _Handler)
    srv.daemon_threads = True
    srv.mock = mock
    srv.reject = reject
    srv.fail_status = fail_status
    srv.echo_id = echo_id
    srv.requests = []
    srv.lock = threading.Lock()
    srv.url = f"http://127.0.0.1:{srv.server_address[1]}"
    t = threading.Thread(target=srv.serve_forever, daemon=True)
    t.start()
    try:
        yield srv
    finally:
        srv.shutdown()
        srv.server_close()
