import init, { MontageView, DecoupleView, LossView } from "./pkg/jigclu_web.js";

const $ = (id) => document.getElementById(id);
const SCALE = 3;

function rgbaCanvas(rgba, side, scale) {
  const c = document.createElement("canvas");
  c.width = side;
  c.height = side;
  c.style.width = `${side * scale}px`;
  c.style.height = `${side * scale}px`;
  c.getContext("2d").putImageData(new ImageData(new Uint8ClampedArray(rgba), side, side), 0, 0);
  return c;
}

function drawGray(canvas, values, side, px) {
  let lo = Infinity, hi = -Infinity;
  for (const v of values) { lo = Math.min(lo, v); hi = Math.max(hi, v); }
  const span = hi - lo || 1;
  canvas.width = side * px;
  canvas.height = side * px;
  const ctx = canvas.getContext("2d");
  for (let r = 0; r < side; r++) {
    for (let c = 0; c < side; c++) {
      const g = Math.round(255 * (values[r * side + c] - lo) / span);
      ctx.fillStyle = `rgb(${g},${g},${g})`;
      ctx.fillRect(c * px, r * px, px, px);
    }
  }
}

function montage() {
  const n = +$("mb-n").value, m = +$("mb-m").value, ratio = +$("mb-ratio").value;
  $("mb-ratio-v").textContent = ratio.toFixed(2);
  let view;
  try {
    view = new MontageView(n, m, ratio, +$("mb-seed").value >>> 0, $("mb-aug").checked);
  } catch (e) {
    $("mb-info").textContent = String(e);
    return;
  }
  const side = view.side();
  $("mb-sources").replaceChildren(...Array.from({ length: n }, (_, i) => rgbaCanvas(view.source_rgba(i), side, 1)));
  const clusters = view.cluster_ids(), locations = view.location_ids();
  const slot = side / m;
  $("mb-montages").replaceChildren(...Array.from({ length: view.count() }, (_, j) => {
    const c = rgbaCanvas(view.montage_rgba(j), side, SCALE);
    const ctx = c.getContext("2d");
    ctx.font = "9px sans-serif";
    ctx.strokeStyle = "white";
    for (let p = 0; p < m * m; p++) {
      const x = (p % m) * slot, y = Math.floor(p / m) * slot;
      ctx.strokeRect(x + 0.5, y + 0.5, slot - 1, slot - 1);
      ctx.fillStyle = "black";
      ctx.fillRect(x + 1, y + 1, 22, 10);
      ctx.fillStyle = "white";
      ctx.fillText(`${clusters[j * m * m + p]}/${locations[j * m * m + p]}`, x + 2, y + 9);
    }
    return c;
  }));
  $("mb-info").textContent = `patch ${view.patch()} px, overlap ${view.overlap()} px, slot ${slot} px`;
  view.free();
}

function decouple() {
  const h = +$("dc-h").value, m = +$("dc-m").value;
  let view;
  try {
    view = new DecoupleView(h, m, +$("dc-seed").value >>> 0);
  } catch (e) {
    $("dc-info").textContent = String(e);
    return;
  }
  const up = view.up_side();
  const px = Math.max(2, Math.floor(160 / up));
  drawGray($("dc-in"), view.input(), h, Math.floor((up * px) / h));
  drawGray($("dc-up"), view.upsampled(), up, px);
  drawGray($("dc-out"), view.pooled(), m, Math.floor((up * px) / m));
  const pooled = Array.from(view.pooled(), (v) => v.toFixed(3));
  $("dc-info").textContent = `${h}x${h} -> ${up}x${up} -> ${m}x${m}: [${pooled.join(", ")}]`;
  view.free();
}

function loss() {
  const n = +$("ls-n").value, m = +$("ls-m").value;
  const tau = +$("ls-tau").value, noise = +$("ls-noise").value;
  $("ls-tau-v").textContent = tau.toFixed(2);
  $("ls-noise-v").textContent = noise.toFixed(2);
  let v;
  try {
    v = new LossView(n, m, tau, noise, 3);
  } catch (e) {
    $("ls-info").textContent = String(e);
    return;
  }
  $("ls-info").textContent =
    `L_clu ${v.loss.toFixed(4)}   (all-identical embeddings: ${v.collapsed.toFixed(4)})\n` +
    `retrieval ${v.retrieval.toFixed(3)}   (chance ${v.chance.toFixed(3)})`;
  v.free();
}

await init();
for (const id of ["mb-n", "mb-m", "mb-ratio", "mb-seed", "mb-aug"]) $(id).addEventListener("input", montage);
for (const id of ["dc-h", "dc-m", "dc-seed"]) $(id).addEventListener("input", decouple);
for (const id of ["ls-n", "ls-m", "ls-tau", "ls-noise"]) $(id).addEventListener("input", loss);
montage();
decouple();
loss();
