// Diverging blue <-> red colormap centered at zero charge.
// Magnitude is normalized per scene by the largest |charge| seen.

export type Rgb = [number, number, number];

const NEGATIVE: Rgb = [0.2, 0.4, 1.0];
const NEUTRAL: Rgb = [0.82, 0.82, 0.82];
const POSITIVE: Rgb = [1.0, 0.25, 0.2];

function mix(a: Rgb, b: Rgb, t: number): Rgb {
  return [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t];
}

export function chargeColor(chargeUC: number, maxAbsUC: number): Rgb {
  if (!isFinite(chargeUC) || maxAbsUC <= 0) return NEUTRAL;
  const t = Math.max(-1, Math.min(1, chargeUC / maxAbsUC));
  return t >= 0 ? mix(NEUTRAL, POSITIVE, t) : mix(NEUTRAL, NEGATIVE, -t);
}

export function perVertexCharges(
  n: number,
  groups: Record<string, { indices: number[]; charge_uC: number }>,
  groupCharges: Record<string, number> | null,
): Float64Array {
  const out = new Float64Array(n);
  for (const [name, info] of Object.entries(groups)) {
    const value = groupCharges && name in groupCharges ? groupCharges[name] : info.charge_uC;
    for (const idx of info.indices) out[idx] = value;
  }
  return out;
}
