import init, { mask_demo, schedule_curves, p_schedule, color_shift_demo } from "./pkg/asuka_web.js";

const $ = (id) => document.getElementById(id);

function paint(canvas, panel) {
  canvas.width = panel.width;
  canvas.height = panel.height;
  canvas.classList.add("px");
  const data = new ImageData(new Uint8ClampedArray(panel.rgba()), panel.width, panel.height);
  canvas.getContext("2d").putImageData(data, 0, 0);
  panel.free();
}

function drawMasks() {
  const seed = BigInt($("m-seed").value || 0);
  const radius = Number($("m-radius").value);
  const factor = Number($("m-factor").value);
  $("m-radius-v").textContent = radius;
  try {
    const d = mask_demo(seed, 256, radius, factor);
    paint($("m-orig"), d.original());
    paint($("m-dil"), d.dilated());
    paint($("m-jag"), d.jagged());
    $("m-info").textContent =
      `base=${d.base}${d.combined ? " + irregular" : ""}${d.fallback ? " (rectangle fallback)" : ""}  ` +
      `ratio=${d.ratio.toFixed(3)}  dilated=${d.dilated_ratio.toFixed(3)}`;
    d.free();
  } catch (e) {
    $("m-info").textContent = String(e);
  }
}

function axes(ctx, w, h, pad, xmax, label) {
  ctx.clearRect(0, 0, w, h);
  ctx.strokeStyle = "#999";
  ctx.lineWidth = 1;
  ctx.setLineDash([]);
  ctx.strokeRect(pad, pad, w - 2 * pad, h - 2 * pad);
  ctx.fillStyle = "#555";
  ctx.font = "11px sans-serif";
  ctx.fillText("0", pad - 4, h - pad + 13);
  ctx.fillText(String(xmax), w - pad - 20, h - pad + 13);
  ctx.fillText("1", pad - 12, pad + 4);
  ctx.fillText(label, w / 2 - 10, h - 4);
}

function line(ctx, ys, w, h, pad, color, dash) {
  ctx.strokeStyle = color;
  ctx.lineWidth = 2;
  ctx.setLineDash(dash);
  ctx.beginPath();
  ys.forEach((y, i) => {
    const px = pad + (i / Math.max(ys.length - 1, 1)) * (w - 2 * pad);
    const py = h - pad - y * (h - 2 * pad);
    i === 0 ? ctx.moveTo(px, py) : ctx.lineTo(px, py);
  });
  ctx.stroke();
}

function drawSchedules() {
  const steps = Math.max(2, Number($("s-steps").value) || 1000);
  const decay = Math.max(1, Number($("s-decay").value) || 2000);
  const pFinal = Math.min(1, Math.max(0, Number($("s-final").value)));
  const c = $("s-ab");
  const ctx = c.getContext("2d");
  const pad = 24;
  axes(ctx, c.width, c.height, pad, steps, "t");
  for (const [family, color] of [["diffusion", "#1f77b4"], ["rectified-flow", "#d62728"]]) {
    const ab = schedule_curves(family, steps);
    const a = [], b = [];
    for (let i = 0; i < ab.length; i += 2) { a.push(ab[i]); b.push(ab[i + 1]); }
    line(ctx, a, c.width, c.height, pad, color, []);
    line(ctx, b, c.width, c.height, pad, color, [6, 4]);
  }
  const maxStep = Math.round(decay * 1.5);
  const p = p_schedule(1.0, pFinal, decay, maxStep);
  const cp = $("s-p");
  const cpx = cp.getContext("2d");
  axes(cpx, cp.width, cp.height, pad, maxStep, "step");
  line(cpx, Array.from(p), cp.width, cp.height, pad, "#2ca02c", []);
  const at = (k) => p[Math.min(k, maxStep)].toFixed(3);
  $("s-info").textContent = `p(0)=${at(0)}  p(${Math.round(decay / 2)})=${at(Math.round(decay / 2))}  p(${decay})=${at(decay)}`;
}

function drawShift() {
  const seed = BigInt($("g-seed").value || 0);
  const shift = Number($("g-shift").value);
  const band = Number($("g-band").value);
  $("g-shift-v").textContent = shift.toFixed(2);
  $("g-band-v").textContent = band;
  try {
    const d = color_shift_demo(seed, shift, band);
    paint($("g-truth"), d.truth());
    paint($("g-shifted"), d.shifted());
    paint($("g-overlay"), d.overlay());
    $("g-info").textContent = `G@e = ${d.gae.toFixed(3)} over ${d.band_pixels} band pixels`;
    d.free();
  } catch (e) {
    $("g-info").textContent = String(e);
  }
}

await init();
for (const id of ["m-seed", "m-radius", "m-factor"]) $(id).addEventListener("input", drawMasks);
$("m-next").addEventListener("click", () => { $("m-seed").value = Number($("m-seed").value) + 1; drawMasks(); });
for (const id of ["s-steps", "s-decay", "s-final"]) $(id).addEventListener("input", drawSchedules);
for (const id of ["g-seed", "g-shift", "g-band"]) $(id).addEventListener("input", drawShift);
drawMasks();
drawSchedules();
drawShift();
