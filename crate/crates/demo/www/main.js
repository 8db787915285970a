import init, { renderScene, exchangePreview, gatePreview } from "./pkg/csknet_demo.js";

const $ = (id) => document.getElementById(id);

function figure(row, img, caption) {
  const fig = document.createElement("figure");
  const canvas = document.createElement("canvas");
  canvas.width = img.width;
  canvas.height = img.height;
  canvas.getContext("2d").putImageData(new ImageData(new Uint8ClampedArray(img.rgba), img.width, img.height), 0, 0);
  const cap = document.createElement("figcaption");
  cap.textContent = caption;
  fig.append(canvas, cap);
  row.append(fig);
}

function sceneArgs() {
  return [Number($("seed").value) >>> 0, Number($("index").value), Number($("night").value)];
}

function drawScene() {
  const s = renderScene(...sceneArgs());
  const row = $("scene-row");
  row.replaceChildren();
  figure(row, s.eo, s.night ? "EO (night)" : "EO (day)");
  figure(row, s.ir, "IR");
  figure(row, s.label, "labels");
}

function drawExchange() {
  const gamma = (cls) => Float64Array.from(document.querySelectorAll(cls), (el) => Number(el.value));
  const v = exchangePreview(...sceneArgs(), $("spatial").checked, gamma(".geo"), gamma(".gir"), Number($("threshold").value));
  const row = $("exchange-row");
  row.replaceChildren();
  figure(row, v.eo, `EO branch (${(100 * v.swapped).toFixed(0)}% from IR)`);
  figure(row, v.ir, "IR branch");
}

function drawGates() {
  const v = gatePreview(...sceneArgs(), Number($("unit").value) >>> 0, Number($("forced").value));
  const row = $("gate-row");
  row.replaceChildren();
  const names = ["z1 (IR)", "z2 (EO)", "z3 (sum)"];
  const means = v.means;
  for (let k = 0; k < 3; k++) figure(row, v.gate(k), `${names[k]} mean ${means[k].toFixed(2)}`);
  figure(row, v.fused, "fused");
}

function redraw() {
  $("index-out").textContent = $("index").value;
  $("night-out").textContent = $("night").value;
  $("threshold-out").textContent = $("threshold").value;
  try {
    drawScene();
    drawExchange();
    drawGates();
    $("error").textContent = "";
  } catch (e) {
    $("error").textContent = String(e);
  }
}

await init();
document.querySelectorAll("input, select").forEach((el) => el.addEventListener("input", redraw));
redraw();
