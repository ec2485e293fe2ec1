"""Wide field-of-view camera models.

Two radial models share one code path:

* ``taylor`` -- polynomial in the *elevation* angle
  ``theta = atan(z / sqrt(x^2 + y^2))``, any power allowed. Points below the
  camera equator (``z < 0``) have negative elevation and are valid as long as
  they fall inside ``elevation_range``; panoramic annular lenses rely on this.
* ``kb`` -- Kannala-Brandt odd polynomial ``k1*a + k2*a^3 + k3*a^5 + ...`` in
  the *incidence* angle ``a = atan2(sqrt(x^2 + y^2), z) = pi/2 - theta``.

In both cases the pixel is ``rho(angle) * h(p) + (u_c, v_c)`` where
``h(p) = (x, y) / sqrt(x^2 + y^2)``.

All methods accept a single 3-vector / pixel or an ``(N, 3)`` / ``(N, 2)`` stack.
"""
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import polynomial as npoly

from .exceptions import ConfigError, Degenerate, NoConvergence, OutOfFov

TAYLOR = "taylor"
KANNALA_BRANDT = "kb"

AXIS_EPS = 1e-18  # x^2 + y^2 <= AXIS_EPS * |p|^2 counts as on-axis
_RANGE_SLACK = 1e-12
_TABLE_SIZE = 4097
_NEWTON_TOL = 1e-12
_MAX_NEWTON = 100


def elevation(p):
    """Elevation angle ``atan(z / sqrt(x^2 + y^2))`` in radians."""
    p = np.asarray(p, dtype=float)
    s = np.hypot(p[..., 0], p[..., 1])
    if np.any(s == 0.0):
        raise Degenerate("elevation is undefined on the optical axis")
    return np.arctan(p[..., 2] / s)


def _as_stack(a, width):
    a = np.asarray(a, dtype=float)
    single = a.ndim == 1
    a = np.atleast_2d(a)
    if a.shape[-1] != width:
        raise ValueError(f"expected trailing dimension {width}, got {a.shape}")
    return a, single


@dataclass(frozen=True, eq=False)
class CameraModel:
    """Immutable intrinsics plus projection math.

    Parameters
    ----------
    kind : {"taylor", "kb"}
    rho_coeffs : sequence of float
        Taylor: ``a0, a1, a2, ...``. KB: ``k1, k2, ...`` for ``a^1, a^3, ...``.
    principal_point : (u_c, v_c)
    elevation_range : (theta_min, theta_max)
        Radians, measured as elevation for both kinds.
    image_size : (width, height)
    zp_coeffs : sequence of float, optional
        Taylor unprojection polynomial ``b0, b1, ...`` in pixel radius. When
        absent the projection polynomial is inverted numerically.
    """

    kind: str
    rho_coeffs: tuple
    principal_point: tuple
    elevation_range: tuple
    image_size: tuple
    zp_coeffs: tuple = None
    _poly: np.ndarray = field(init=False, repr=False)
    _dpoly: np.ndarray = field(init=False, repr=False)
    _table: tuple = field(init=False, repr=False)

    def __post_init__(self):
        kind = str(self.kind).lower()
        if kind in ("kannala-brandt", "kannalabrandt", "kannala_brandt"):
            kind = KANNALA_BRANDT
        if kind not in (TAYLOR, KANNALA_BRANDT):
            raise ConfigError(f"unknown camera kind {self.kind!r}")
        set_ = object.__setattr__
        set_(self, "kind", kind)
        rho = tuple(float(c) for c in self.rho_coeffs)
        if not rho or not all(np.isfinite(rho)):
            raise ConfigError("rho_coeffs must be a non-empty list of finite numbers")
        set_(self, "rho_coeffs", rho)
        if self.zp_coeffs is not None:
            if kind != TAYLOR:
                raise ConfigError("zp_coeffs only apply to the taylor model")
            set_(self, "zp_coeffs", tuple(float(c) for c in self.zp_coeffs))
        set_(self, "principal_point", tuple(float(c) for c in self.principal_point))
        set_(self, "image_size", tuple(float(c) for c in self.image_size))
        lo, hi = (float(a) for a in self.elevation_range)
        set_(self, "elevation_range", (lo, hi))
        if not (-np.pi / 2 < lo < hi <= np.pi / 2):
            raise ConfigError(f"need -pi/2 < theta_min < theta_max <= pi/2, got {(lo, hi)}")
        w, h = self.image_size
        uc, vc = self.principal_point
        if not (0.0 <= uc <= w and 0.0 <= vc <= h):
            raise ConfigError("principal point lies outside the image")

        if kind == TAYLOR:
            poly = np.array(rho)
        else:
            poly = np.zeros(2 * len(rho))
            poly[1::2] = rho
        set_(self, "_poly", poly)
        set_(self, "_dpoly", npoly.polyder(poly) if poly.size > 1 else np.zeros(1))

        a_lo, a_hi = self.angle_range
        angles = np.linspace(a_lo, a_hi, _TABLE_SIZE)
        radii = npoly.polyval(angles, poly)
        steps = np.diff(radii)
        if not (np.all(steps > 0) or np.all(steps < 0)):
            raise ConfigError("rho is not strictly monotonic over the elevation range")
        scale = np.max(np.abs(radii))
        if np.min(radii) < -1e-9 * scale:
            raise ConfigError("rho is negative inside the elevation range")
        if steps[0] < 0:
            angles, radii = angles[::-1], radii[::-1]
        set_(self, "_table", (radii.copy(), angles.copy()))

    # ------------------------------------------------------------------ basics
    @property
    def angle_range(self):
        """Range of the polynomial's own angle (elevation or incidence)."""
        lo, hi = self.elevation_range
        if self.kind == TAYLOR:
            return lo, hi
        return np.pi / 2 - hi, np.pi / 2 - lo

    @property
    def radius_range(self):
        radii = self._table[0]
        return float(max(radii[0], 0.0)), float(radii[-1])

    def rho(self, angle):
        return npoly.polyval(angle, self._poly)

    def rho_prime(self, angle):
        return npoly.polyval(angle, self._dpoly)

    def _model_angle(self, theta):
        return theta if self.kind == TAYLOR else np.pi / 2 - theta

    def in_fov(self, p):
        """Boolean mask: finite, nonzero, and elevation inside the range."""
        P, single = _as_stack(p, 3)
        finite = np.all(np.isfinite(P), axis=1)
        Pz = np.where(finite[:, None], P, 1.0)
        s = np.hypot(Pz[:, 0], Pz[:, 1])
        n = np.hypot(s, Pz[:, 2])
        theta = np.arctan2(Pz[:, 2], s)
        lo, hi = self.elevation_range
        ok = finite & (n > 0) & (theta >= lo - _RANGE_SLACK) & (theta <= hi + _RANGE_SLACK)
        return bool(ok[0]) if single else ok

    def in_image(self, px):
        U, single = _as_stack(px, 2)
        w, h = self.image_size
        ok = (U[:, 0] >= 0) & (U[:, 0] <= w) & (U[:, 1] >= 0) & (U[:, 1] <= h)
        return bool(ok[0]) if single else ok

    # -------------------------------------------------------------- projection
    def project(self, p):
        """Pixel of a camera-frame point.

        Raises :class:`Degenerate` for the zero vector and :class:`OutOfFov`
        when the elevation leaves ``elevation_range``. A point exactly on the
        optical axis maps to the principal point.
        """
        P, single = _as_stack(p, 3)
        if not np.all(np.isfinite(P)):
            raise ValueError("point is not finite")
        n2 = np.einsum("ij,ij->i", P, P)
        if np.any(n2 == 0.0):
            raise Degenerate("cannot project the camera centre")
        s = np.hypot(P[:, 0], P[:, 1])
        theta = np.arctan2(P[:, 2], s)
        lo, hi = self.elevation_range
        if np.any((theta < lo - _RANGE_SLACK) | (theta > hi + _RANGE_SLACK)):
            raise OutOfFov("point elevation outside the camera field of view")
        uv = self.project_unchecked(P)
        return uv[0] if single else uv

    def project_unchecked(self, P):
        """Vectorised projection without FoV checks; ``P`` is ``(N, 3)``.

        The polynomial is simply extrapolated outside the calibrated range,
        which keeps optimisers well defined when an iterate wanders off.
        """
        P = np.asarray(P, dtype=float)
        s2 = P[:, 0] ** 2 + P[:, 1] ** 2
        n2 = s2 + P[:, 2] ** 2
        s = np.sqrt(s2)
        axis = s2 <= AXIS_EPS * n2
        theta = np.arctan2(P[:, 2], s)
        r = self.rho(self._model_angle(theta))
        safe = np.where(axis, 1.0, s)
        h = np.where(axis[:, None], 0.0, P[:, :2] / safe[:, None])
        return r[:, None] * h + np.asarray(self.principal_point)

    def jacobian_project(self, p):
        """Analytic 2x3 Jacobian of :meth:`project` (``(N, 2, 3)`` for stacks)."""
        P, single = _as_stack(p, 3)
        s2 = P[:, 0] ** 2 + P[:, 1] ** 2
        n2 = s2 + P[:, 2] ** 2
        if np.any(s2 <= AXIS_EPS * n2):
            raise Degenerate("projection Jacobian is singular on the optical axis")
        lo, hi = self.elevation_range
        theta = np.arctan2(P[:, 2], np.sqrt(s2))
        if np.any((theta < lo - _RANGE_SLACK) | (theta > hi + _RANGE_SLACK)):
            raise OutOfFov("point elevation outside the camera field of view")
        J = self.jacobian_unchecked(P)
        return J[0] if single else J

    def jacobian_unchecked(self, P):
        P = np.asarray(P, dtype=float)
        x, y, z = P[:, 0], P[:, 1], P[:, 2]
        s2 = x * x + y * y
        n2 = s2 + z * z
        s2 = np.maximum(s2, 1e-300)
        s = np.sqrt(s2)
        theta = np.arctan2(z, s)
        angle = self._model_angle(theta)
        r = self.rho(angle)
        dr = self.rho_prime(angle)
        # d(elevation)/dp
        dtheta = np.stack([-z * x / (s * n2), -z * y / (s * n2), s / n2], axis=1)
        if self.kind == KANNALA_BRANDT:
            dtheta = -dtheta
        h = np.stack([x / s, y / s], axis=1)
        s3 = s2 * s
        dh = np.zeros((P.shape[0], 2, 3))
        dh[:, 0, 0] = y * y / s3
        dh[:, 0, 1] = -x * y / s3
        dh[:, 1, 0] = -x * y / s3
        dh[:, 1, 1] = x * x / s3
        return (dr[:, None, None] * h[:, :, None] * dtheta[:, None, :]
                + r[:, None, None] * dh)

    # ------------------------------------------------------------ unprojection
    def unproject(self, px):
        """Unit bearing vector(s) for pixel(s).

        Uses ``zp_coeffs`` when present, otherwise inverts rho with a
        safeguarded Newton iteration seeded from a monotone lookup table.
        """
        U, single = _as_stack(px, 2)
        if not np.all(np.isfinite(U)):
            raise ValueError("pixel is not finite")
        d = U - np.asarray(self.principal_point)
        r = np.hypot(d[:, 0], d[:, 1])
        r_lo, r_hi = self.radius_range
        tol = 1e-9 * max(r_hi, 1.0)
        if np.any((r < r_lo - tol) | (r > r_hi + tol)):
            raise OutOfFov("pixel radius outside the calibrated field of view")
        axis = r <= tol
        safe = np.where(axis, 1.0, r)
        h = np.where(axis[:, None], 0.0, d / safe[:, None])

        if self.zp_coeffs is not None:
            zp = npoly.polyval(r, np.asarray(self.zp_coeffs))
            vec = np.column_stack([d, zp])
            out = vec / np.linalg.norm(vec, axis=1, keepdims=True)
        else:
            angle = self._invert_rho(np.clip(r, r_lo, r_hi))
            if self.kind == TAYLOR:
                out = np.column_stack([np.cos(angle)[:, None] * h, np.sin(angle)])
            else:
                out = np.column_stack([np.sin(angle)[:, None] * h, np.cos(angle)])
        out[axis] = (0.0, 0.0, 1.0)
        return out[0] if single else out

    def valid_pixels(self, px):
        """Mask of pixels whose radius is unprojectable."""
        U, single = _as_stack(px, 2)
        finite = np.all(np.isfinite(U), axis=1)
        d = np.where(finite[:, None], U - np.asarray(self.principal_point), 0.0)
        r = np.hypot(d[:, 0], d[:, 1])
        r_lo, r_hi = self.radius_range
        tol = 1e-9 * max(r_hi, 1.0)
        ok = finite & (r >= r_lo - tol) & (r <= r_hi + tol)
        return bool(ok[0]) if single else ok

    def _invert_rho(self, r):
        radii, angles = self._table
        idx = np.clip(np.searchsorted(radii, r), 1, radii.size - 1)
        lo_a, hi_a = angles[idx - 1], angles[idx]
        lo_r, hi_r = radii[idx - 1], radii[idx]
        frac = np.where(hi_r > lo_r, (r - lo_r) / np.where(hi_r > lo_r, hi_r - lo_r, 1.0), 0.0)
        a = lo_a + frac * (hi_a - lo_a)
        # bracket [lo_a, hi_a] maps to [lo_r, hi_r]; keep it as we go
        increasing = self._table[1][-1] > self._table[1][0]
        blo = np.minimum(lo_a, hi_a)
        bhi = np.maximum(lo_a, hi_a)
        done = np.zeros(r.shape, dtype=bool)
        for _ in range(_MAX_NEWTON):
            f = self.rho(a) - r
            done = np.abs(f) <= _NEWTON_TOL * np.maximum(1.0, r)
            if np.all(done):
                return a
            # rho increases with angle iff the table angles increase with radius
            above = f > 0
            if increasing:
                bhi = np.where(above, np.minimum(bhi, a), bhi)
                blo = np.where(above, blo, np.maximum(blo, a))
            else:
                blo = np.where(above, np.maximum(blo, a), blo)
                bhi = np.where(above, bhi, np.minimum(bhi, a))
            fp = self.rho_prime(a)
            step = np.where(fp != 0, f / np.where(fp != 0, fp, 1.0), np.inf)
            cand = a - step
            bad = ~np.isfinite(cand) | (cand < blo) | (cand > bhi)
            cand = np.where(bad, 0.5 * (blo + bhi), cand)
            stalled = np.abs(cand - a) <= 4 * np.finfo(float).eps * np.maximum(1.0, np.abs(a))
            a = np.where(done, a, cand)
            if np.all(done | stalled):
                return a
        raise NoConvergence("numeric inversion of rho did not converge")

    # ------------------------------------------------------------------ helpers
    def fit_zp(self, degree=8, samples=2001):
        """Least-squares unprojection polynomial ``z_p(r) = r * tan(theta(r))``.

        Only meaningful for the taylor kind. Returns the coefficients lowest
        order first, suitable for ``zp_coeffs``.
        """
        if self.kind != TAYLOR:
            raise ConfigError("zp polynomial is defined for the taylor model only")
        lo, hi = self.elevation_range
        hi = min(hi, np.pi / 2 - 1e-3)
        theta = np.linspace(lo, hi, samples)
        r = self.rho(theta)
        return tuple(npoly.polyfit(r, r * np.tan(theta), degree))

    def median_scale(self):
        """Median |d rho / d angle| over the FoV, in pixels per radian."""
        a = np.linspace(*self.angle_range, 257)
        return float(np.median(np.abs(self.rho_prime(a))))

    def to_dict(self):
        return {
            "kind": self.kind,
            "rho": list(self.rho_coeffs),
            "zp": None if self.zp_coeffs is None else list(self.zp_coeffs),
            "pp": list(self.principal_point),
            "elev_deg": [float(np.degrees(a)) for a in self.elevation_range],
            "size": list(self.image_size),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            kind=d["kind"],
            rho_coeffs=d["rho"],
            principal_point=d["pp"],
            elevation_range=tuple(np.radians(d["elev_deg"])),
            image_size=d["size"],
            zp_coeffs=d.get("zp"),
        )


def pal_camera():
    """Panoramic annular lens: 360 x (40..120 deg polar), 1280x960."""
    return CameraModel(
        kind=TAYLOR,
        rho_coeffs=(351.9, -224.0, 0.0, 8.0),
        principal_point=(640.0, 480.0),
        elevation_range=(np.radians(-30.0), np.radians(50.0)),
        image_size=(1280, 960),
    )


def fisheye_camera():
    """Kannala-Brandt fisheye: 360 x (0..95 deg polar), 512x512."""
    return CameraModel(
        kind=KANNALA_BRANDT,
        rho_coeffs=(150.0, -2.0, 0.1),
        principal_point=(256.0, 256.0),
        elevation_range=(np.radians(-5.0), np.pi / 2),
        image_size=(512, 512),
    )
