import { defineConfig } from "vite";

// the dev server proxies API calls to a locally running massing service
export default defineConfig({
  server: {
    proxy: {
      "/sessions": "http://127.0.0.1:8000",
      "/health": "http://127.0.0.1:8000",
    },
  },
  build: {
    chunkSizeWarningLimit: 1200,
  },
});
