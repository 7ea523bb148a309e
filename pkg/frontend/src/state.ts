// Client-side session state and the reducer that folds server messages
// into it. No sockets or DOM in here, so tests can drive it with canned
// messages.

import {
  FrameMsg,
  HelloMsg,
  OverlayDoc,
  ServerMsg,
} from './protocol.js';

export interface SaveEntry {
  index: number;
  static: boolean;
  u: number[];
  z: number[];
  obsB64: string | null; // frame pixels at save time, for the thumbnail
}

export interface UiState {
  status: 'connecting' | 'open' | 'closed';
  models: string[];
  model: string | null;
  rateHz: number;
  m: number;
  imgH: number;
  imgW: number;
  uRest: number[];
  z0: number[];
  overlay: OverlayDoc | null;
  sliders: number[];
  frame: FrameMsg | null; // newest accepted frame only
  lastTick: number;
  saves: SaveEntry[];
  exportText: string | null;
  error: string | null;
  warning: string | null;
}

export function initialState(): UiState {
  return {
    status: 'connecting',
    models: [],
    model: null,
    rateHz: 50,
    m: 0,
    imgH: 0,
    imgW: 0,
    uRest: [],
    z0: [],
    overlay: null,
    sliders: [0, 0, 0, 0],
    frame: null,
    lastTick: -1,
    saves: [],
    exportText: null,
    error: null,
    warning: null,
  };
}

function applyHello(s: UiState, msg: HelloMsg): UiState {
  const next: UiState = { ...s, models: msg.models, model: msg.model };
  if (msg.model !== null && msg.u_rest) {
    next.m = msg.m ?? 0;
    next.imgH = msg.img_h ?? 0;
    next.imgW = msg.img_w ?? 0;
    next.uRest = msg.u_rest.slice();
    next.z0 = (msg.z0 ?? []).slice();
    next.overlay = msg.overlay ?? null;
    next.rateHz = msg.rate_hz;
    // a hello with a model means the server session restarted at rest
    next.sliders = msg.u_rest.slice();
    next.frame = null;
    next.lastTick = -1;
  }
  return next;
}

function applyFrame(s: UiState, msg: FrameMsg): UiState {
  // the tick readout must never run backwards; tick 0 is the one
  // exception because a reset reply legitimately restarts the count
  if (msg.tick !== 0 && msg.tick < s.lastTick) return s;
  return { ...s, frame: msg, lastTick: msg.tick };
}

/** Fold one server message into the state. Returns a new object when
 * anything changed; stale frames return the input untouched. */
export function reduce(s: UiState, msg: ServerMsg): UiState {
  switch (msg.kind) {
    case 'hello':
      return applyHello(s, msg);
    case 'frame':
      return applyFrame(s, msg);
    case 'list_models':
      return { ...s, models: msg.models };
    case 'save_state': {
      const entry: SaveEntry = {
        index: msg.index,
        static: msg.static,
        u: msg.u.slice(),
        z: msg.z.slice(),
        obsB64: s.frame ? s.frame.pixels : null,
      };
      return { ...s, saves: [...s.saves, entry] };
    }
    case 'export':
      return { ...s, exportText: msg.text };
    case 'error':
      return { ...s, error: msg.message };
  }
}
