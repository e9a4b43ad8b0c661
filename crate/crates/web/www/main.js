import init, { Demo } from "./pkg/havc_web.js";

const $ = (id) => document.getElementById(id);
let demo = null;
let chosen = null;

function paint(canvas, pixels, side) {
  const ctx = canvas.getContext("2d");
  const img = ctx.createImageData(side, side);
  for (let i = 0; i < side * side; i++) {
    const v = pixels[i] ?? 0;
    img.data.set([v, v, v, 255], i * 4);
  }
  const tmp = new OffscreenCanvas(side, side);
  tmp.getContext("2d").putImageData(img, 0, 0);
  ctx.imageSmoothingEnabled = false;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  ctx.drawImage(tmp, 0, 0, canvas.width, canvas.height);
}

function outline(canvas, box, side, colour) {
  if (!box) return;
  const [r0, c0, r1, c1] = box;
  const s = canvas.width / side;
  const ctx = canvas.getContext("2d");
  ctx.strokeStyle = colour;
  ctx.lineWidth = 2;
  ctx.strokeRect(c0 * s + 1, r0 * s + 1, (c1 - c0) * s - 2, (r1 - r0) * s - 2);
}

const fmt = (v, d = 3) => (v === null || v === undefined ? "" : v.toFixed(d));

function showHead(layer, head) {
  chosen = [layer, head];
  const side = demo.grid_side();
  paint($("head"), demo.head_pixels(layer, head), side);
  paint($("mask"), demo.head_mask(layer, head), side);
  $("head-caption").textContent = `attention of L${layer}H${head}`;
}

function render() {
  const s = JSON.parse(demo.summary());
  const side = demo.grid_side();
  $("status").textContent = s.ok ? (s.fallback ? "no head passed the entropy cut; ranked by gradient" : "") : s.error;
  paint($("guidance"), demo.guidance_pixels(), side);
  outline($("guidance"), s.region, side, "#2a2");
  outline($("guidance"), s.bbox, side, "#d22");
  $("iou").textContent = s.ok ? `IoU ${s.iou.toFixed(3)}` : "";

  const body = $("heads").querySelector("tbody");
  body.replaceChildren();
  for (const h of s.heads) {
    const tr = document.createElement("tr");
    if (h.weight !== null) tr.className = "selected";
    else if (!h.passed_entropy) tr.className = "filtered";
    const cells = [`L${h.layer}H${h.head}`, h.role ?? "", fmt(h.entropy), h.components, fmt(h.grad_score, 4), fmt(h.fused), fmt(h.weight)];
    for (const c of cells) {
      const td = document.createElement("td");
      td.textContent = c;
      tr.append(td);
    }
    tr.addEventListener("click", () => showHead(h.layer, h.head));
    body.append(tr);
  }
  if (!chosen && s.heads.length) chosen = [s.heads[0].layer, s.heads[0].head];
  if (chosen) showHead(...chosen);
}

function knobs() {
  for (const id of ["alpha", "topk", "tau", "cut"]) {
    document.querySelector(`output[for=${id}]`).textContent = $(id).value;
  }
  demo.configure(+$("alpha").value, +$("topk").value, +$("tau").value, +$("cut").value);
  render();
}

function load() {
  demo?.free();
  chosen = null;
  demo = new Demo(BigInt($("seed").value || 0), +$("scene").value || 0);
  knobs();
}

await init();
for (const id of ["alpha", "topk", "tau", "cut"]) $(id).addEventListener("input", knobs);
for (const id of ["seed", "scene"]) $(id).addEventListener("change", load);
load();
