// DOM wiring for the live simulator page. Rendering runs on its own
// requestAnimationFrame loop; message handling just updates SimClient
// state, so a slow paint never backs up the socket.

import { SimClient } from './client.js';
import { decodePixels, markerPositions, SLIDER_MAX, SLIDER_MIN } from './protocol.js';
import { grayscaleRgba, thumbnailRgba } from './render.js';
import { SaveEntry, UiState } from './state.js';

const statusEl = document.getElementById('status') as HTMLSpanElement;
const modelSel = document.getElementById('model') as HTMLSelectElement;
const tickEl = document.getElementById('tick') as HTMLSpanElement;
const viewEl = document.getElementById('view') as HTMLCanvasElement;
const slidersEl = document.getElementById('sliders') as HTMLDivElement;
const saveBtn = document.getElementById('save') as HTMLButtonElement;
const staticEl = document.getElementById('static') as HTMLInputElement;
const resetBtn = document.getElementById('reset') as HTMLButtonElement;
const restBtn = document.getElementById('rest') as HTMLButtonElement;
const savesEl = document.getElementById('saves') as HTMLUListElement;
const horizonEl = document.getElementById('horizon') as HTMLInputElement;
const exportBtn = document.getElementById('export') as HTMLButtonElement;
const errorEl = document.getElementById('error') as HTMLDivElement;
const warnEl = document.getElementById('warning') as HTMLDivElement;

const params = new URLSearchParams(location.search);
const wsUrl = params.get('ws') ?? `ws://${location.hostname || '127.0.0.1'}:8765`;

const client = new SimClient(wsUrl);

const offscreen = document.createElement('canvas');
let sliderEls: HTMLInputElement[] = [];
let lastDrawnTick = -1;
let lastModelShown: string | null = null;
let lastSaveCount = 0;
let lastExportText: string | null = null;

function buildSliders(state: UiState) {
  slidersEl.textContent = '';
  sliderEls = [];
  state.sliders.forEach((v, i) => {
    const row = document.createElement('div');
    row.className = 'slider-row';
    const label = document.createElement('span');
    label.textContent = `p${i}`;
    const input = document.createElement('input');
    input.type = 'range';
    input.min = String(SLIDER_MIN);
    input.max = String(SLIDER_MAX);
    input.step = '1';
    input.value = String(v);
    const val = document.createElement('span');
    val.className = 'slider-val';
    val.textContent = `${v.toFixed(0)} kPa`;
    input.addEventListener('input', () => {
      client.setSlider(i, Number(input.value));
      val.textContent = `${Number(input.value).toFixed(0)} kPa`;
    });
    row.append(label, input, val);
    slidersEl.append(row);
    sliderEls.push(input);
  });
}

function syncSliders(state: UiState) {
  if (sliderEls.length !== state.sliders.length) {
    buildSliders(state);
    return;
  }
  state.sliders.forEach((v, i) => {
    if (Number(sliderEls[i].value) !== v) {
      sliderEls[i].value = String(v);
      const val = sliderEls[i].nextElementSibling as HTMLSpanElement;
      if (val) val.textContent = `${v.toFixed(0)} kPa`;
    }
  });
}

function drawFrame(state: UiState) {
  const frame = state.frame;
  if (!frame || !state.imgW || frame.tick === lastDrawnTick) return;
  lastDrawnTick = frame.tick;
  const w = state.imgW;
  const h = state.imgH;
  if (offscreen.width !== w || offscreen.height !== h) {
    offscreen.width = w;
    offscreen.height = h;
  }
  const scale = Math.max(1, Math.floor(480 / Math.max(w, h)));
  if (viewEl.width !== w * scale || viewEl.height !== h * scale) {
    viewEl.width = w * scale;
    viewEl.height = h * scale;
  }
  const pix = decodePixels(frame.pixels);
  const octx = offscreen.getContext('2d')!;
  octx.putImageData(new ImageData(grayscaleRgba(pix), w, h), 0, 0);
  const ctx = viewEl.getContext('2d')!;
  ctx.imageSmoothingEnabled = false;
  ctx.drawImage(offscreen, 0, 0, viewEl.width, viewEl.height);
  if (state.overlay) {
    ctx.strokeStyle = '#ff5252';
    ctx.lineWidth = 2;
    for (const [px, py] of markerPositions(frame.z, state.overlay)) {
      ctx.beginPath();
      ctx.arc((px + 0.5) * scale, (py + 0.5) * scale, 4, 0, 2 * Math.PI);
      ctx.stroke();
    }
  }
  tickEl.textContent = frame.paused
    ? `tick ${frame.tick} (paused)`
    : `tick ${frame.tick}`;
}

function saveLabel(entry: SaveEntry): string {
  const kind = entry.static ? 'static' : 'dynamic';
  const u = entry.u.map((v) => v.toFixed(0)).join(', ');
  return `#${entry.index} ${kind}  u=[${u}]`;
}

function renderSaves(state: UiState) {
  if (state.saves.length === lastSaveCount) return;
  lastSaveCount = state.saves.length;
  savesEl.textContent = '';
  for (const entry of state.saves) {
    const li = document.createElement('li');
    if (entry.obsB64 && state.imgW) {
      const t = thumbnailRgba(decodePixels(entry.obsB64), state.imgW, state.imgH);
      const c = document.createElement('canvas');
      c.width = t.w;
      c.height = t.h;
      c.getContext('2d')!.putImageData(new ImageData(t.rgba, t.w, t.h), 0, 0);
      li.append(c);
    }
    const span = document.createElement('span');
    span.textContent = saveLabel(entry);
    li.append(span);
    savesEl.append(li);
  }
  exportBtn.disabled = state.saves.length === 0;
}

function downloadExport(text: string) {
  // the text goes out exactly as the server produced it; the optimizer
  // CLI reads the downloaded file without any rewriting
  const blob = new Blob([text], { type: 'application/json' });
  const url = URL.createObjectURL(blob);
  const a = document.createElement('a');
  a.href = url;
  a.download = 'waypoints.json';
  a.click();
  setTimeout(() => URL.revokeObjectURL(url), 5000);
}

function applyState(state: UiState) {
  statusEl.textContent = state.status;
  statusEl.className = `status-${state.status}`;
  if (state.models.join('\n') !== lastModelShown) {
    lastModelShown = state.models.join('\n');
    modelSel.textContent = '';
    const blank = document.createElement('option');
    blank.value = '';
    blank.textContent = '(pick a model)';
    modelSel.append(blank);
    for (const name of state.models) {
      const opt = document.createElement('option');
      opt.value = name;
      opt.textContent = name;
      modelSel.append(opt);
    }
  }
  if (state.model !== null && modelSel.value !== state.model) {
    modelSel.value = state.model;
  }
  syncSliders(state);
  renderSaves(state);
  errorEl.textContent = state.error ?? '';
  errorEl.style.display = state.error ? 'block' : 'none';
  warnEl.textContent = state.warning ?? '';
  warnEl.style.display = state.warning ? 'block' : 'none';
  if (state.exportText !== null && state.exportText !== lastExportText) {
    lastExportText = state.exportText;
    downloadExport(state.exportText);
  }
}

function loop() {
  drawFrame(client.state);
  requestAnimationFrame(loop);
}

function main() {
  client.onChange = applyState;
  modelSel.addEventListener('change', () => {
    if (modelSel.value) client.selectModel(modelSel.value);
  });
  saveBtn.addEventListener('click', () => client.saveState(staticEl.checked));
  resetBtn.addEventListener('click', () => client.reset());
  restBtn.addEventListener('click', () => {
    client.setSliders(client.state.uRest.slice());
  });
  exportBtn.addEventListener('click', () => {
    const T = Math.max(1, Math.round(Number(horizonEl.value) || 100));
    client.requestExport(T);
  });
  errorEl.addEventListener('click', () => client.clearError());
  buildSliders(client.state);
  client.connect();
  loop();
}

main();
