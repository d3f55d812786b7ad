// Gaussian-mixture evaluation for the density chart.
// The service returns mixture components; the curve itself is the only
// numeric work the client does.

export interface MixtureComponent {
  weight: number;
  mu: number; // log HKD
  sigma: number;
}

const SQRT_2PI = Math.sqrt(2 * Math.PI);

// Abramowitz & Stegun 7.1.26 rational approximation (|err| < 1.5e-7)
export function erf(x: number): number {
  const sign = x < 0 ? -1 : 1;
  const ax = Math.abs(x);
  const t = 1 / (1 + 0.3275911 * ax);
  const poly =
    t * (0.254829592 + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
  return sign * (1 - poly * Math.exp(-ax * ax));
}

export function mixturePdf(components: MixtureComponent[], x: number): number {
  let density = 0;
  for (const c of components) {
    const z = (x - c.mu) / c.sigma;
    density += (c.weight * Math.exp(-0.5 * z * z)) / (c.sigma * SQRT_2PI);
  }
  return density;
}

export function mixtureCdf(components: MixtureComponent[], x: number): number {
  let mass = 0;
  for (const c of components) {
    mass += c.weight * 0.5 * (1 + erf((x - c.mu) / (c.sigma * Math.SQRT2)));
  }
  return mass;
}

export function mixtureQuantile(components: MixtureComponent[], q: number): number {
  if (q <= 0 || q >= 1) throw new Error("quantile level must be in (0, 1)");
  let lo = Infinity;
  let hi = -Infinity;
  for (const c of components) {
    lo = Math.min(lo, c.mu - 12 * c.sigma);
    hi = Math.max(hi, c.mu + 12 * c.sigma);
  }
  for (let i = 0; i < 120; i++) {
    const mid = 0.5 * (lo + hi);
    if (mixtureCdf(components, mid) < q) lo = mid;
    else hi = mid;
  }
  return 0.5 * (lo + hi);
}

export interface DensityCurve {
  xs: number[]; // log HKD grid
  ys: number[]; // density at each grid point
  spannedMass: number; // cdf(right end) - cdf(left end)
}

// Grid spans the p01..p99 range with at least 200 points.
export function densityCurve(components: MixtureComponent[], points = 240): DensityCurve {
  const n = Math.max(points, 200);
  const left = mixtureQuantile(components, 0.01);
  const right = mixtureQuantile(components, 0.99);
  const xs: number[] = [];
  const ys: number[] = [];
  for (let i = 0; i < n; i++) {
    const x = left + ((right - left) * i) / (n - 1);
    xs.push(x);
    ys.push(mixturePdf(components, x));
  }
  return { xs, ys, spannedMass: mixtureCdf(components, right) - mixtureCdf(components, left) };
}

// Trapezoid integral of the rendered curve; the UI asserts this stays within
// 5% of the spanned cdf mass as a self-check on the chart.
export function trapezoidMass(curve: { xs: number[]; ys: number[] }): number {
  let area = 0;
  for (let i = 1; i < curve.xs.length; i++) {
    area += 0.5 * (curve.ys[i] + curve.ys[i - 1]) * (curve.xs[i] - curve.xs[i - 1]);
  }
  return area;
}
