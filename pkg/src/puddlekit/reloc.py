"""Location independence: reference maps, export bundles, pointer rewriting.

A reference map lists where inside objects of one type embedded
global-space addresses live; registering one per type is enough because
instances share their layout.  With those maps plus the allocator's
type-tagged object walk, a whole puddle's references can be found and
rewritten when its pool is mapped at a conflicting address.

Bundles (``*.pexp``) carry a pool without serialization: a length-prefixed
binary manifest, then each member puddle's raw image, each section followed
by a CRC-32C trailer (docs/bundle-format.md).
"""

import struct
from dataclasses import dataclass
from typing import Iterable, Optional

from .checksum import crc32c
from .core import PuddleId
from .errors import ConflictingMap, CorruptBundle, InvalidRange, VersionMismatch

BUNDLE_VERSION = 1


@dataclass(frozen=True)
class ReferenceMap:
    """Reference slots of one type: (byte offset, target type id or 0)."""

    type_id: int
    slots: tuple

    def __post_init__(self):
        prev = -1
        for off, kind in self.slots:
            if off % 8:
                raise InvalidRange(f"slot offset {off} not 8-byte aligned")
            if off <= prev:
                raise InvalidRange("slot offsets must be strictly increasing")
            prev = off

    def to_wire(self):
        return {"type_id": self.type_id, "slots": [[o, k] for o, k in self.slots]}

    @classmethod
    def from_wire(cls, obj):
        return cls(int(obj["type_id"]),
                   tuple((int(o), int(k)) for o, k in obj["slots"]))


class TypeRegistry:
    """type_id -> ReferenceMap; re-registration must be identical."""

    def __init__(self):
        self.maps: dict[int, ReferenceMap] = {}

    def register(self, rmap: ReferenceMap):
        cur = self.maps.get(rmap.type_id)
        if cur is not None:
            if cur.slots != rmap.slots:
                raise ConflictingMap(
                    f"type 0x{rmap.type_id:x} already has a different map")
            return False
        self.maps[rmap.type_id] = rmap
        return True

    def get(self, type_id: int) -> Optional[ReferenceMap]:
        return self.maps.get(type_id)

    def to_wire(self):
        return [m.to_wire() for m in self.maps.values()]

    def merge_wire(self, items):
        for obj in items:
            self.register(ReferenceMap.from_wire(obj))


@dataclass
class BundlePuddle:
    uuid: PuddleId
    assigned_base: int
    total_size: int
    heap_size: int


@dataclass
class BundleManifest:
    pool_name: str
    pool_id: bytes          # 16 bytes
    root_uuid: PuddleId
    puddles: list           # [BundlePuddle], root first
    typemaps: list          # [ReferenceMap]
    version: int = BUNDLE_VERSION

    def pack(self) -> bytes:
        name = self.pool_name.encode()
        out = [struct.pack("<IH", self.version, len(name)), name,
               self.pool_id, self.root_uuid.raw,
               struct.pack("<I", len(self.puddles))]
        for p in self.puddles:
            out.append(p.uuid.raw)
            out.append(struct.pack("<QQQ", p.assigned_base, p.total_size,
                                   p.heap_size))
        out.append(struct.pack("<I", len(self.typemaps)))
        for m in self.typemaps:
            out.append(struct.pack("<QI", m.type_id, len(m.slots)))
            for off, kind in m.slots:
                out.append(struct.pack("<QQ", off, kind))
        return b"".join(out)

    @classmethod
    def unpack(cls, blob: bytes) -> "BundleManifest":
        try:
            pos = 0
            version, name_len = struct.unpack_from("<IH", blob, pos)
            pos += 6
            if version != BUNDLE_VERSION:
                raise VersionMismatch(f"bundle version {version}")
            name = blob[pos:pos + name_len].decode()
            pos += name_len
            pool_id = blob[pos:pos + 16]
            root = PuddleId(blob[pos + 16:pos + 32])
            pos += 32
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            puddles = []
            for _ in range(n):
                raw = blob[pos:pos + 16]
                base, total, heap = struct.unpack_from("<QQQ", blob, pos + 16)
                puddles.append(BundlePuddle(PuddleId(raw), base, total, heap))
                pos += 40
            (nm,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            maps = []
            for _ in range(nm):
                tid, ns = struct.unpack_from("<QI", blob, pos)
                pos += 12
                slots = []
                for _ in range(ns):
                    off, kind = struct.unpack_from("<QQ", blob, pos)
                    slots.append((off, kind))
                    pos += 16
                maps.append(ReferenceMap(tid, tuple(slots)))
            return cls(name, pool_id, root, puddles, maps, version)
        except VersionMismatch:
            raise
        except Exception as e:
            raise CorruptBundle(f"manifest: {e}") from None


def write_bundle(path, manifest: BundleManifest, images: Iterable[bytes]):
    with open(path, "wb") as f:
        blob = manifest.pack()
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", crc32c(blob)))
        for img in images:
            f.write(img)
            f.write(struct.pack("<I", crc32c(img)))


def read_manifest(path) -> BundleManifest:
    with open(path, "rb") as f:
        (length,) = struct.unpack("<I", f.read(4))
        blob = f.read(length)
        (crc,) = struct.unpack("<I", f.read(4))
    if len(blob) != length or crc32c(blob) != crc:
        raise CorruptBundle("manifest checksum mismatch")
    return BundleManifest.unpack(blob)


def read_bundle(path):
    """(manifest, iterator of puddle images); every section is CRC-checked."""
    f = open(path, "rb")
    try:
        (length,) = struct.unpack("<I", f.read(4))
        blob = f.read(length)
        (crc,) = struct.unpack("<I", f.read(4))
        if len(blob) != length or crc32c(blob) != crc:
            raise CorruptBundle("manifest checksum mismatch")
        manifest = BundleManifest.unpack(blob)
    except (CorruptBundle, VersionMismatch):
        f.close()
        raise
    except Exception as e:
        f.close()
        raise CorruptBundle(str(e)) from None

    def images():
        try:
            for p in manifest.puddles:
                img = f.read(p.total_size)
                (c,) = struct.unpack("<I", f.read(4))
                if len(img) != p.total_size or crc32c(img) != c:
                    raise CorruptBundle(f"image for {p.uuid} corrupt")
                yield img
        finally:
            f.close()

    return manifest, images()


class RewriteEngine:
    """Rewrites embedded references of one puddle against a relocation context.

    The context maps pre-relocation ("old") address ranges to target
    puddles; anything outside it resolves through current reservations and
    stays untouched.  Rewriting is idempotent because old and new ranges
    never alias (new assignments exclude pending old ranges).
    """

    def __init__(self, typemaps, context, ensure_reserved, load, store):
        self.typemaps = typemaps          # type_id -> ReferenceMap
        self.context = context            # [(old_lo, old_hi, PuddleId)]
        self.ensure_reserved = ensure_reserved  # PuddleId -> current base
        self.load = load
        self.store = store
        self.scanned = 0
        self.rewritten = 0

    def resolve(self, value: int) -> int:
        if value == 0:
            return 0
        for lo, hi, pid in self.context:
            if lo <= value < hi:
                return self.ensure_reserved(pid) + (value - lo)
        return value

    def rewrite_slot(self, slot_addr: int):
        (v,) = struct.unpack("<Q", self.load(slot_addr, 8))
        self.scanned += 1
        nv = self.resolve(v)
        if nv != v:
            self.store(slot_addr, struct.pack("<Q", nv))
            self.rewritten += 1
            return True
        return False

    def rewrite_objects(self, descriptors) -> list:
        """Process every reference slot; returns rewritten slot addresses."""
        touched = []
        for desc in descriptors:
            rmap = self.typemaps.get(desc.type_id)
            if rmap is None:
                continue
            for off, _kind in rmap.slots:
                if off + 8 > desc.size:
                    continue
                if self.rewrite_slot(desc.addr + off):
                    touched.append(desc.addr + off)
        return touched
