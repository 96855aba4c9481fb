import init, { CityView, encode_heading, cell_heading } from "./pkg/gridcast_web_demo.js";

const $ = (id) => document.getElementById(id);
const names = ["Mon", "Tue", "Wed", "Thu", "Fri", "Sat", "Sun"];
let view = null;

function build() {
  if (view) view.free();
  view = new CityView(Number($("seed").value), Number($("size").value), Number($("noise").value));
  view.set_day(Number($("day").value));
  const n = view.size();
  $("city").width = n;
  $("city").height = n;
  drawEnvelope();
  draw();
}

function draw() {
  const bin = Number($("bin").value);
  const n = view.size();
  const px = view.frame_rgba(bin, Number($("channel").value));
  $("city").getContext("2d").putImageData(new ImageData(new Uint8ClampedArray(px), n, n), 0, 0);
  const m = bin * 5;
  $("clock").textContent = `${String(Math.floor(m / 60)).padStart(2, "0")}:${String(m % 60).padStart(2, "0")}`;
  const mse = view.persistence_mse(bin);
  $("mse").innerHTML = Array.from(mse, (v, i) => `<tr><td>${(i + 1) * 5} min</td><td>${v.toExponential(3)}</td></tr>`).join("");
  drawEnvelope(bin);
}

function drawEnvelope(bin) {
  const c = $("envelope");
  const g = c.getContext("2d");
  const env = view.envelope();
  g.clearRect(0, 0, c.width, c.height);
  g.beginPath();
  env.forEach((v, i) => {
    const x = (i / env.length) * c.width;
    const y = c.height - v * (c.height - 4);
    i ? g.lineTo(x, y) : g.moveTo(x, y);
  });
  g.stroke();
  if (bin !== undefined) {
    g.fillStyle = "#c33";
    g.fillRect((bin / env.length) * c.width, 0, 2, c.height);
  }
}

function heading() {
  const d = Number($("deg").value);
  $("degv").textContent = `${d}°`;
  $("code").textContent = encode_heading(d);
  try {
    $("cell").textContent = cell_heading(...["ne", "se", "sw", "nw"].map((k) => Number($(k).value)));
  } catch (e) {
    $("cell").textContent = String(e.message ?? e);
  }
}

await init();
names.forEach((n, i) => $("day").add(new Option(n, i)));
$("build").onclick = build;
$("day").onchange = () => { view.set_day(Number($("day").value)); draw(); };
$("bin").oninput = draw;
$("channel").onchange = draw;
for (const id of ["deg", "ne", "se", "sw", "nw"]) $(id).oninput = heading;
build();
heading();
