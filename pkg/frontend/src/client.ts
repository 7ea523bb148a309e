// Socket lifecycle, slider send pacing, and reconnect. The socket
// constructor and timers are injectable so tests can run against fakes
// or the node ws package.

import {
  N_CHANNELS,
  clampPressure,
  parseServerMsg,
} from './protocol.js';
import { UiState, initialState, reduce } from './state.js';

export interface SocketLike {
  send(data: string): void;
  close(): void;
  onopen: (() => void) | null;
  onmessage: ((ev: { data: unknown }) => void) | null;
  onclose: (() => void) | null;
  onerror: (() => void) | null;
}

export type SocketFactory = (url: string) => SocketLike;

export interface ClientOpts {
  socketFactory?: SocketFactory;
  now?: () => number;
  setTimer?: (fn: () => void, ms: number) => unknown;
  clearTimer?: (handle: unknown) => void;
  minGapMs?: number; // floor between set_pressures sends (20 ms = 50/s)
  reconnectMs?: number; // 0 disables auto reconnect
}

export class SimClient {
  state: UiState = initialState();
  onChange: ((s: UiState) => void) | null = null;

  private url: string;
  private makeSocket: SocketFactory;
  private now: () => number;
  private setTimer: (fn: () => void, ms: number) => unknown;
  private clearTimer: (handle: unknown) => void;
  private minGapMs: number;
  private reconnectMs: number;

  private sock: SocketLike | null = null;
  private isOpen = false;
  private lastSend = -Infinity;
  private flushTimer: unknown = null;
  private dirty = false; // sliders changed since last send
  private stopped = false; // user asked to close; no reconnects
  private resendSliders: number[] | null = null; // restore after reconnect

  constructor(url: string, opts: ClientOpts = {}) {
    this.url = url;
    this.makeSocket =
      opts.socketFactory ?? ((u) => new WebSocket(u) as unknown as SocketLike);
    this.now = opts.now ?? (() => Date.now());
    this.setTimer = opts.setTimer ?? ((fn, ms) => setTimeout(fn, ms));
    this.clearTimer = opts.clearTimer ?? ((h) => clearTimeout(h as number));
    this.minGapMs = opts.minGapMs ?? 20;
    this.reconnectMs = opts.reconnectMs ?? 1000;
  }

  connect(): void {
    this.patch({ status: 'connecting' });
    const sock = this.makeSocket(this.url);
    this.sock = sock;
    sock.onopen = () => {
      this.isOpen = true;
      this.patch({ status: 'open', warning: null });
      if (this.state.model !== null) {
        // new server session: re-select the model, then push the sliders
        // the user had, because select starts the sim back at rest
        this.resendSliders = this.resendSliders ?? this.state.sliders.slice();
        this.sendDoc({ kind: 'select_model', model: this.state.model });
      } else if (this.dirty) {
        this.flushSliders();
      }
    };
    sock.onmessage = (ev) => this.handleRaw(String(ev.data));
    sock.onclose = () => {
      this.isOpen = false;
      if (this.sock !== sock) return; // superseded by a newer connect
      this.patch({ status: 'closed' });
      if (!this.stopped && this.reconnectMs > 0) {
        if (this.state.model !== null && this.resendSliders === null) {
          this.resendSliders = this.state.sliders.slice();
        }
        this.setTimer(() => {
          if (!this.stopped) this.connect();
        }, this.reconnectMs);
      }
    };
    sock.onerror = () => {
      // close always follows; nothing to do here
    };
  }

  close(): void {
    this.stopped = true;
    if (this.flushTimer !== null) {
      this.clearTimer(this.flushTimer);
      this.flushTimer = null;
    }
    if (this.sock) this.sock.close();
  }

  // -- user actions

  setSlider(channel: number, value: number): void {
    const sliders = this.state.sliders.slice();
    sliders[channel] = clampPressure(value);
    this.patch({ sliders });
    this.dirty = true;
    this.scheduleFlush();
  }

  setSliders(u: number[]): void {
    this.patch({ sliders: u.map(clampPressure) });
    this.dirty = true;
    this.scheduleFlush();
  }

  selectModel(name: string): void {
    this.resendSliders = null;
    this.sendDoc({ kind: 'select_model', model: name });
  }

  saveState(isStatic: boolean): void {
    this.sendDoc({ kind: 'save_state', static: isStatic });
  }

  requestExport(T: number): void {
    this.sendDoc({ kind: 'export', T });
  }

  reset(): void {
    this.sendDoc({ kind: 'reset' });
  }

  listModels(): void {
    this.sendDoc({ kind: 'list_models' });
  }

  clearError(): void {
    this.patch({ error: null });
  }

  // -- internals

  private handleRaw(raw: string): void {
    const msg = parseServerMsg(raw);
    if (msg === null) return;
    const next = reduce(this.state, msg);
    if (next !== this.state) {
      this.state = next;
      this.emit();
    }
    if (msg.kind === 'hello' && msg.model !== null && this.resendSliders) {
      // reconnect path: the hello reset our sliders to rest, put the
      // user's values back and tell the server about them
      const u = this.resendSliders;
      this.resendSliders = null;
      this.patch({ sliders: u.slice() });
      this.dirty = true;
      this.scheduleFlush();
    }
  }

  private scheduleFlush(): void {
    if (!this.isOpen) {
      this.patch({ warning: 'disconnected: slider values queued' });
      return;
    }
    const wait = this.lastSend + this.minGapMs - this.now();
    if (wait <= 0) {
      this.flushSliders();
    } else if (this.flushTimer === null) {
      this.flushTimer = this.setTimer(() => {
        this.flushTimer = null;
        this.flushSliders();
      }, wait);
    }
  }

  private flushSliders(): void {
    if (!this.isOpen || !this.dirty) return;
    const u = this.state.sliders.slice(0, N_CHANNELS);
    this.sendDoc({ kind: 'set_pressures', u });
    this.lastSend = this.now();
    this.dirty = false;
  }

  private sendDoc(doc: Record<string, unknown>): void {
    if (!this.sock || !this.isOpen) return;
    this.sock.send(JSON.stringify(doc));
  }

  private patch(part: Partial<UiState>): void {
    this.state = { ...this.state, ...part };
    this.emit();
  }

  private emit(): void {
    if (this.onChange) this.onChange(this.state);
  }
}
