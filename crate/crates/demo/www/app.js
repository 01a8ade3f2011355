// Vanilla-JS glue for the wasm demo. Build the wasm package first:
//   wasm-pack build crates/demo --target web --out-dir www/pkg
// then serve crates/demo/www/ from any static file server.

import init, { DemoLab, image_side, phantom_rgba, phantom_volume_ml } from "./pkg/ttas_demo.js";

await init();

const side = image_side();
const $ = (id) => document.getElementById(id);

function paint(canvas, rgba) {
  const ctx = canvas.getContext("2d");
  const img = new ImageData(new Uint8ClampedArray(rgba), side, side);
  ctx.putImageData(img, 0, 0);
}

// ---- panel 1: phantom explorer ----

function refreshPhantom() {
  const seed = +$("pseed").value;
  const idx = +$("pcase").value;
  const noise = +$("pnoise").value / 100;
  $("pseed-val").textContent = seed;
  $("pcase-val").textContent = idx;
  $("pnoise-val").textContent = noise.toFixed(2);
  paint($("phantom"), phantom_rgba(seed, idx, noise, $("pmask").checked));
  $("pvol").textContent = phantom_volume_ml(seed, idx, noise).toFixed(3);
}
for (const id of ["pseed", "pcase", "pnoise", "pmask"]) {
  $(id).addEventListener("input", refreshPhantom);
}
refreshPhantom();

// ---- panel 3: live training (created first; panel 2 reads its teacher) ----

let lab = null;
let timer = null;
let curve = [];

function newLab() {
  const alpha = +$("alpha").value / 100;
  const gamma = +$("gamma").value / 100;
  $("alpha-val").textContent = alpha.toFixed(2);
  $("gamma-val").textContent = gamma.toFixed(2);
  lab = new DemoLab($("method").value, 7, alpha, gamma, 0.7);
  curve = [];
  $("epoch").textContent = "0";
  $("tdice").textContent = "–";
  $("kfrac").textContent = "–";
  paint($("timg"), lab.test_image_rgba(0, true));
  paint($("tpred"), lab.prediction_rgba(0));
  drawCurve();
  refreshThreshold();
}

function drawCurve() {
  const c = $("curve");
  const ctx = c.getContext("2d");
  ctx.clearRect(0, 0, c.width, c.height);
  ctx.strokeStyle = "#bbb";
  ctx.strokeRect(0.5, 0.5, c.width - 1, c.height - 1);
  ctx.fillStyle = "#888";
  ctx.font = "10px sans-serif";
  for (const frac of [0, 0.5, 1]) {
    const y = c.height - 12 - frac * (c.height - 24);
    ctx.fillText(frac.toFixed(1), 4, y + 3);
  }
  if (curve.length < 2) return;
  ctx.strokeStyle = "#c33";
  ctx.beginPath();
  const n = curve.length;
  curve.forEach(([e, d], i) => {
    const x = 24 + (i / (n - 1)) * (c.width - 32);
    const y = c.height - 12 - d * (c.height - 24);
    if (i === 0) ctx.moveTo(x, y); else ctx.lineTo(x, y);
  });
  ctx.stroke();
}

function step() {
  const stats = lab.run_epoch();
  const [epoch, , , kept, , testDice] = stats;
  curve.push([epoch, testDice]);
  $("epoch").textContent = lab.epoch();
  $("tdice").textContent = testDice.toFixed(3);
  $("kfrac").textContent = kept.toFixed(2);
  paint($("tpred"), lab.prediction_rgba(0));
  drawCurve();
  refreshThreshold();
}

$("start").addEventListener("click", () => {
  if (!timer) {
    timer = setInterval(step, 60);
    $("start").disabled = true;
    $("pause").disabled = false;
  }
});
$("pause").addEventListener("click", () => {
  clearInterval(timer);
  timer = null;
  $("start").disabled = false;
  $("pause").disabled = true;
});
$("reset").addEventListener("click", () => {
  clearInterval(timer);
  timer = null;
  $("start").disabled = false;
  $("pause").disabled = true;
  newLab();
});
for (const id of ["method", "alpha", "gamma"]) {
  $(id).addEventListener("input", () => $("reset").click());
}

// ---- panel 2: thresholding against the live teacher ----

function refreshThreshold() {
  if (!lab) return;
  const tau = +$("tau").value / 100;
  const idx = +$("ucase").value;
  const twoSided = $("twosided").checked;
  $("tau-val").textContent = tau.toFixed(2);
  $("ucase-val").textContent = idx;
  paint($("thresh"), lab.threshold_rgba(idx, tau, twoSided));
  $("kept").textContent = (lab.kept_fraction(idx, tau, twoSided) * 100).toFixed(1) + "%";
}
for (const id of ["tau", "twosided", "ucase"]) {
  $(id).addEventListener("input", refreshThreshold);
}

newLab();
