import init, { models, solve, compare, check } from "./pkg/fbsde_wasm.js";

const $ = (id) => document.getElementById(id);
const colours = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e"];

function numerics() {
  return [Number($("paths").value), Number($("steps").value), Number($("seed").value)];
}

function plot(canvas, t, series) {
  const ctx = canvas.getContext("2d");
  const { width: w, height: h } = canvas;
  ctx.clearRect(0, 0, w, h);
  const values = series.flatMap((s) => s.values);
  let lo = Math.min(...values), hi = Math.max(...values);
  if (hi - lo < 1e-12) { lo -= 1; hi += 1; }
  const pad = 30;
  const x = (v) => pad + (v - t[0]) / (t[t.length - 1] - t[0]) * (w - 2 * pad);
  const y = (v) => h - pad - (v - lo) / (hi - lo) * (h - 2 * pad);
  ctx.fillStyle = "#333";
  ctx.fillText(hi.toPrecision(4), 2, pad - 4);
  ctx.fillText(lo.toPrecision(4), 2, h - pad + 12);
  series.forEach((s, k) => {
    ctx.strokeStyle = colours[k % colours.length];
    ctx.beginPath();
    s.values.forEach((v, j) => (j ? ctx.lineTo(x(t[j]), y(v)) : ctx.moveTo(x(t[j]), y(v))));
    ctx.stroke();
    ctx.fillStyle = ctx.strokeStyle;
    ctx.fillText(s.label, w - 120, 14 + 14 * k);
  });
}

function guarded(out, f) {
  try {
    out.classList.remove("fail");
    f();
  } catch (e) {
    out.classList.add("fail");
    out.textContent = String(e);
  }
}

function column(rows, i) {
  return rows.map((r) => r[i]);
}

async function main() {
  await init();
  const list = JSON.parse(models());
  for (const m of list) $("model").add(new Option(m.name, m.name));
  const describe = () => {
    const m = list.find((m) => m.name === $("model").value);
    $("description").textContent = `${m.description}. Defaults: ${JSON.stringify(m.defaults)}`;
  };
  $("model").onchange = describe;
  describe();

  $("solve").onclick = () => guarded($("solve-out"), () => {
    const r = JSON.parse(solve($("model").value, $("params").value, ...numerics()));
    const n = r.y_mean[0].length;
    const series = [];
    for (let i = 0; i < n; i++) series.push({ label: `Y${i + 1}`, values: column(r.y_mean, i) });
    series.push({ label: "U1", values: column(r.u_mean, 0) });
    series.push({ label: "Y⁰1", values: column(r.seed_mean, 0) });
    plot($("solve-plot"), r.t, series);
    $("solve-out").textContent =
      `converged ${r.converged} at k=${r.converged_at} after ${r.iterations} iterations\n` +
      `sup-differences of Y: ${r.supdiff_y.map((v) => v.toExponential(2)).join(", ")}\n` +
      `eps_mono ${r.eps_mono.toExponential(3)}, backward residual rms ${r.backward_rms.toExponential(3)}`;
  });

  $("compare").onclick = () => guarded($("compare-out"), () => {
    const lower = $("params").value;
    const upper = JSON.stringify({ ...JSON.parse(lower || "{}"), ...JSON.parse($("upper").value || "{}") });
    const r = JSON.parse(compare($("model").value, lower, upper, ...numerics()));
    const n = r.gap_y[0].length;
    const series = [];
    for (let i = 0; i < n; i++) {
      series.push({ label: `gap Y${i + 1}`, values: column(r.gap_y, i) });
      series.push({ label: `gap X${i + 1}`, values: column(r.gap_x, i) });
    }
    plot($("compare-plot"), r.t, series);
    $("compare-out").textContent =
      `ordering ${r.pass ? "holds" : "violated"}: ` +
      `X ${(100 * r.violation_x).toFixed(3)}%, Y ${(100 * r.violation_y).toFixed(3)}% of triples`;
  });

  $("check").onclick = () => guarded($("check-out"), () => {
    const lines = JSON.parse(check($("model").value, $("params").value));
    $("check-out").textContent = lines
      .map((l) => `${l.pass ? "pass" : "FAIL"} A${l.assumption} ${l.check}: ${l.worst.toExponential(3)} vs ${l.threshold.toExponential(3)}`)
      .join("\n");
  });
}

main();
