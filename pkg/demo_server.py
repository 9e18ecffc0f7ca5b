"""
Stub detection server speaking the toolkit's JSON wire protocol.

Stands in for a vision-language model shim so the http backend can be
exercised without network egress:

    POST /detect   {"image": base64 PGM, "prompt": str} -> {"bbox": [...], "confidence": f}
    GET  /health

Modes:
- fixed:  always answer the configured box and confidence;
- script: answer a list of scripted replies in order (the last one repeats);
          each entry is {"status": int, "body": <json or raw string>};
- oracle: decode the PGM and run the local mock localizer on it.
"""
import argparse
import base64
import binascii
import json
import logging
import threading
from typing import Any, Dict, List, Optional

from flask import Flask, Response, jsonify, request
from werkzeug.serving import make_server

from app.detect import mock_localize
from app.errors import AirtError
from app.seqcore import decode_pgm
from config import get_config

logger = logging.getLogger(__name__)

STUB_MODES = ("fixed", "script", "oracle")


def create_app(mode: str = "oracle", bbox: Optional[List[float]] = None, confidence: float = 0.9,
               script: Optional[List[Dict[str, Any]]] = None) -> Flask:
    if mode not in STUB_MODES:
        raise ValueError(f"unknown stub mode {mode!r}")
    if mode == "fixed" and bbox is None:
        raise ValueError("fixed mode needs a bbox")
    if mode == "script" and not script:
        raise ValueError("script mode needs at least one scripted reply")

    app = Flask(__name__)
    # calls and prompts seen, for tests
    app.config['STUB_STATE'] = {'calls': 0, 'prompts': []}

    @app.route('/health', methods=['GET'])
    def health():
        return jsonify({'status': 'ok', 'mode': mode})

    @app.route('/detect', methods=['POST'])
    def detect():
        state = app.config['STUB_STATE']
        payload = request.get_json(silent=True)
        if not isinstance(payload, dict) or 'image' not in payload or 'prompt' not in payload:
            return jsonify({'error': "body must be JSON with 'image' and 'prompt'"}), 400
        index = state['calls']
        state['calls'] += 1
        state['prompts'].append(payload['prompt'])

        if mode == 'fixed':
            return jsonify({'bbox': bbox, 'confidence': confidence})
        if mode == 'script':
            entry = script[min(index, len(script) - 1)]
            body = entry.get('body', {})
            text = body if isinstance(body, str) else json.dumps(body)
            return Response(text, status=entry.get('status', 200), mimetype='application/json')

        try:
            pixels = decode_pgm(base64.b64decode(payload['image'], validate=True))
            det = mock_localize(pixels)
        except (binascii.Error, AirtError, ValueError) as e:
            return jsonify({'error': str(e)}), 422
        return jsonify({'bbox': det.box.to_list(), 'confidence': det.confidence})

    return app


class BackgroundServer:
    """Serve a Flask app from a daemon thread on an ephemeral localhost port."""

    def __init__(self, app: Flask, host: str = '127.0.0.1', port: int = 0):
        self.app = app
        self._server = make_server(host, port, app, threaded=True)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    @property
    def url(self) -> str:
        return f"http://{self._server.host}:{self._server.port}"

    def start(self) -> "BackgroundServer":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        self._thread.join(timeout=5)


def main(argv=None) -> None:
    env = get_config()
    parser = argparse.ArgumentParser(description="stub detection server")
    parser.add_argument('--mode', choices=STUB_MODES, default='oracle')
    parser.add_argument('--bbox', type=float, nargs=4, default=None)
    parser.add_argument('--confidence', type=float, default=0.9)
    parser.add_argument('--host', default=env.STUB_HOST)
    parser.add_argument('--port', type=int, default=env.STUB_PORT)
    args = parser.parse_args(argv)
    logging.basicConfig(level=env.LOG_LEVEL, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    app = create_app(args.mode, args.bbox, args.confidence)
    logger.info("stub detection server (%s) on http://%s:%d/detect", args.mode, args.host, args.port)
    app.run(host=args.host, port=args.port)


if __name__ == '__main__':
    main()
