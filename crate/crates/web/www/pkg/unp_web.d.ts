/* tslint:disable */
/* eslint-disable */

/**
 * A checkpoint held by the page between calls.
 */
export class Model {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Model and exact observables plus fidelity for a bit string or `ghz`.
     */
    evolve(protocol: string, state: string): Series;
    constructor(bytes: Uint8Array);
    summary(): string;
}

/**
 * Time series returned to the page. Model columns are empty when only the
 * exact evolution was run.
 */
export class Series {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    /**
     * `Z`, `X`, `ZZ` or `E` from exact evolution.
     */
    exact(name: string): Float64Array;
    fidelity(): Float64Array;
    hx(): Float64Array;
    hz(): Float64Array;
    /**
     * Same observables from the model; empty without a checkpoint.
     */
    model(name: string): Float64Array;
    times(): Float64Array;
}

/**
 * Drive and exact observables on an `lx` by `ly` lattice.
 */
export function exact_evolution(lx: number, ly: number, protocol: string, state: string, t_total: number, n_t: number): Series;

/**
 * Protocol text for one of the three families. `seed` only affects
 * `fourier`; the pulse shapes use the built-in out-of-distribution shapes.
 */
export function protocol_text(kind: string, seed: bigint, t_total: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_model_free: (a: number, b: number) => void;
    readonly __wbg_series_free: (a: number, b: number) => void;
    readonly exact_evolution: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number) => [number, number, number];
    readonly model_evolve: (a: number, b: number, c: number, d: number, e: number) => [number, number, number];
    readonly model_new: (a: number, b: number) => [number, number, number];
    readonly model_summary: (a: number) => [number, number];
    readonly protocol_text: (a: number, b: number, c: bigint, d: number) => [number, number, number, number];
    readonly series_exact: (a: number, b: number, c: number) => [number, number];
    readonly series_fidelity: (a: number) => [number, number];
    readonly series_hx: (a: number) => [number, number];
    readonly series_hz: (a: number) => [number, number];
    readonly series_model: (a: number, b: number, c: number) => [number, number];
    readonly series_times: (a: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
