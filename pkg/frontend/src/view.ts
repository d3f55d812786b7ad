// DOM rendering. Every number shown comes from an API response field; the
// only client-side computation is the density curve.

import { densityCurve, trapezoidMass, type MixtureComponent } from "./mixture.js";
import type { PlateView } from "./state.js";
import type { PlateValidation } from "./plate.js";

const HKD_PER_USD = 7.8; // cosmetic USD hint only

export function formatHkd(value: number): string {
  const usd = value / HKD_PER_USD;
  return `HK$${Math.round(value).toLocaleString("en-US")} (≈ US$${Math.round(usd).toLocaleString("en-US")})`;
}

export function renderValidation(el: HTMLElement, v: PlateValidation): void {
  el.textContent = v.valid ? `✓ ${v.canonical}` : (v.message ?? "");
  el.className = v.valid ? "hint ok" : "hint error";
}

function svgPath(xs: number[], ys: number[], width: number, height: number): string {
  const xMin = xs[0];
  const xMax = xs[xs.length - 1];
  const yMax = Math.max(...ys) || 1;
  const px = (x: number) => ((x - xMin) / (xMax - xMin)) * width;
  const py = (y: number) => height - (y / yMax) * (height - 6);
  let d = `M ${px(xs[0]).toFixed(2)} ${py(ys[0]).toFixed(2)}`;
  for (let i = 1; i < xs.length; i++) {
    d += ` L ${px(xs[i]).toFixed(2)} ${py(ys[i]).toFixed(2)}`;
  }
  return d;
}

export function renderDensity(el: HTMLElement, components: MixtureComponent[],
                              quantilesLog: Record<string, number>): void {
  const curve = densityCurve(components);
  const mass = trapezoidMass(curve);
  // chart self-check: the drawn area must track the probability it spans
  const consistent = Math.abs(mass - curve.spannedMass) <= 0.05 * curve.spannedMass;
  const width = 560;
  const height = 180;
  const xMin = curve.xs[0];
  const xMax = curve.xs[curve.xs.length - 1];
  const markers = ["p05", "p50", "p95"]
    .filter((q) => quantilesLog[q] !== undefined)
    .map((q) => {
      const x = ((quantilesLog[q] - xMin) / (xMax - xMin)) * width;
      return `<line x1="${x.toFixed(1)}" y1="0" x2="${x.toFixed(1)}" y2="${height}" class="q" />` +
        `<text x="${(x + 3).toFixed(1)}" y="12" class="qlabel">${q}</text>`;
    })
    .join("");
  el.innerHTML = `
    <svg viewBox="0 0 ${width} ${height}" role="img" aria-label="price density">
      <path d="${svgPath(curve.xs, curve.ys, width, height)}" class="density" />
      ${markers}
    </svg>
    <div class="hint">${consistent ? "" : "warning: curve mass check failed"}</div>`;
}

export function renderView(root: HTMLElement, view: PlateView): void {
  const est = view.estimate;
  const q = view.distribution.quantiles_hkd;
  const similar = view.similar.results
    .map(
      (r) => `
      <li><button class="pivot" data-plate="${r.plate}">${r.plate}</button>
        <span class="dist">${r.distance.toFixed(4)}</span>
        <span class="sale">${r.last_sale ? `last ${formatHkd(r.last_sale.price_hkd)} on ${r.last_sale.date.slice(0, 10)}` : "no recorded sale"}</span>
      </li>`,
    )
    .join("");
  const history = view.history.records
    .map(
      (r) => `
      <tr><td>${r.datetime.slice(0, 10)}</td>
          <td>${r.status === "S" ? formatHkd(r.price_hkd as number) : "unsold"}</td></tr>`,
    )
    .join("");
  root.innerHTML = `
    <section class="estimate">
      <h2>${est.plate}</h2>
      <p class="price">${formatHkd(est.price_hkd)}</p>
      <p class="band">90% band: ${formatHkd(q.p05)} – ${formatHkd(q.p95)}</p>
      <div id="density"></div>
    </section>
    <section class="similar">
      <h3>Similar plates</h3>
      ${similar ? `<ul>${similar}</ul>` : '<p class="hint">index is empty</p>'}
    </section>
    <section class="history">
      <h3>Auction history</h3>
      ${history ? `<table>${history}</table>` : '<p class="hint">no past auctions recorded</p>'}
    </section>`;
  const densityEl = root.querySelector<HTMLElement>("#density");
  if (densityEl) {
    renderDensity(densityEl, view.distribution.components, view.distribution.quantiles_log_hkd);
  }
}
