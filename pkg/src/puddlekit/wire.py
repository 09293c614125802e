"""Length-prefixed frame protocol spoken over the daemon's UNIX socket.

Frame: u32 payload length, u16 code, u64 request id, then a UTF-8 JSON
object with the fields for that code (docs/wire-protocol.md).  Capability
responses may carry file descriptors as SCM_RIGHTS ancillary data on the
same sendmsg.
"""

import array
import json
import socket
import struct

from .errors import ProtocolError

# request codes
PING = 1
GET_NEW_PUDDLE = 2
GET_EXIST_PUDDLE = 3
FREE_PUDDLE = 4
REG_LOG_SPACE = 5
REG_REF_MAP = 6
CREATE_POOL = 7
OPEN_POOL = 8
EXPORT_POOL = 9
IMPORT_BUNDLE = 10
STATUS = 11
HELLO = 12

# response codes
OK = 100
ERR = 101

REQUEST_NAMES = {
    PING: "PING", GET_NEW_PUDDLE: "GET_NEW_PUDDLE",
    GET_EXIST_PUDDLE: "GET_EXIST_PUDDLE", FREE_PUDDLE: "FREE_PUDDLE",
    REG_LOG_SPACE: "REG_LOG_SPACE", REG_REF_MAP: "REG_REF_MAP",
    CREATE_POOL: "CREATE_POOL", OPEN_POOL: "OPEN_POOL",
    EXPORT_POOL: "EXPORT_POOL", IMPORT_BUNDLE: "IMPORT_BUNDLE",
    STATUS: "STATUS", HELLO: "HELLO",
}

_HDR = struct.Struct("<IHQ")
MAX_FRAME = 16 * 1024 * 1024
MAX_FDS = 8


def send_frame(sock: socket.socket, code: int, req_id: int, payload: dict,
               fds=None):
    body = json.dumps(payload, separators=(",", ":")).encode()
    if len(body) > MAX_FRAME:
        raise ProtocolError(f"frame body {len(body)} exceeds limit")
    frame = _HDR.pack(len(body), code, req_id) + body
    if fds:
        sock.sendmsg([frame], [(socket.SOL_SOCKET, socket.SCM_RIGHTS,
                                array.array("i", fds))])
    else:
        sock.sendall(frame)


def _recv_exact(sock, n, anc_fds):
    chunks = []
    while n:
        data, ancdata, flags, _ = sock.recvmsg(n, socket.CMSG_LEN(
            MAX_FDS * array.array("i").itemsize))
        if not data:
            raise ConnectionError("peer closed")
        for level, ctype, cdata in ancdata:
            if level == socket.SOL_SOCKET and ctype == socket.SCM_RIGHTS:
                fds = array.array("i")
                fds.frombytes(cdata[:len(cdata) - len(cdata) % fds.itemsize])
                anc_fds.extend(fds)
        chunks.append(data)
        n -= len(data)
    return b"".join(chunks)


def recv_frame(sock: socket.socket):
    """(code, req_id, payload, fds) of the next frame; ConnectionError on EOF."""
    fds = []
    hdr = _recv_exact(sock, _HDR.size, fds)
    length, code, req_id = _HDR.unpack(hdr)
    if length > MAX_FRAME:
        raise ProtocolError(f"declared frame body {length} exceeds limit")
    body = _recv_exact(sock, length, fds) if length else b""
    try:
        payload = json.loads(body.decode()) if body else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ProtocolError(f"bad frame payload: {e}") from None
    if not isinstance(payload, dict):
        raise ProtocolError("frame payload must be an object")
    return code, req_id, payload, fds
