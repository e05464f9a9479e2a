/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_model_free: (a: number, b: number) => void;
export const __wbg_series_free: (a: number, b: number) => void;
export const exact_evolution: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number) => [number, number, number];
export const model_evolve: (a: number, b: number, c: number, d: number, e: number) => [number, number, number];
export const model_new: (a: number, b: number) => [number, number, number];
export const model_summary: (a: number) => [number, number];
export const protocol_text: (a: number, b: number, c: bigint, d: number) => [number, number, number, number];
export const series_exact: (a: number, b: number, c: number) => [number, number];
export const series_fidelity: (a: number) => [number, number];
export const series_hx: (a: number) => [number, number];
export const series_hz: (a: number) => [number, number];
export const series_model: (a: number, b: number, c: number) => [number, number];
export const series_times: (a: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
